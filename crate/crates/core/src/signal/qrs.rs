//! Hamilton-style QRS segmentation and R-anchored P-wave search.
//!
//! Pipeline: first difference, rectification, centred moving-window
//! integration, then adaptive signal/noise peak levels with a dual threshold,
//! a refractory period and a search-back for missed beats. Each accepted
//! detection is moved to the largest `|x|` within a short window.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QrsConfig {
    pub integration_ms: f64,
    pub refractory_ms: f64,
    /// Weight of a new peak in the running signal/noise peak levels.
    pub adaptation: f64,
    /// Position of the detection threshold between noise and signal levels.
    pub threshold_coefficient: f64,
    /// Search-back threshold as a fraction of the detection threshold.
    pub searchback_factor: f64,
    /// Search back once this many mean RR intervals pass without a beat.
    pub searchback_rr: f64,
    /// Half-width of the refinement window around each detection.
    pub refine_ms: f64,
    /// Span used to seed the peak levels.
    pub init_secs: f64,
    pub min_duration_secs: f64,
}

impl Default for QrsConfig {
    fn default() -> Self {
        Self {
            integration_ms: 80.0,
            refractory_ms: 200.0,
            adaptation: 0.125,
            threshold_coefficient: 0.3125,
            searchback_factor: 0.5,
            searchback_rr: 1.66,
            refine_ms: 40.0,
            init_secs: 2.0,
            min_duration_secs: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RPeakStatus {
    Ok,
    /// Fewer samples than the minimum duration; nothing was searched.
    TooShort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RPeaks {
    pub indices: Vec<usize>,
    pub status: RPeakStatus,
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

fn integrate(filtered: &[f64], window: usize) -> Vec<f64> {
    let n = filtered.len();
    let mut rect = vec![0.0; n];
    for i in 1..n {
        rect[i] = (filtered[i] - filtered[i - 1]).abs();
    }
    let half = window / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + rect[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(n);
            (prefix[hi] - prefix[lo]) / window as f64
        })
        .collect()
}

/// Dominant local maxima: strictly above everything earlier within `radius`
/// and at least as large as everything later.
fn candidates(ma: &[f64], radius: usize) -> Vec<usize> {
    let n = ma.len();
    (0..n)
        .filter(|&i| {
            let v = ma[i];
            v > 0.0
                && (i.saturating_sub(radius)..i).all(|j| ma[j] < v)
                && (i + 1..(i + radius + 1).min(n)).all(|j| ma[j] <= v)
        })
        .collect()
}

struct Levels {
    signal: f64,
    noise: f64,
}

impl Levels {
    fn threshold(&self, coefficient: f64) -> f64 {
        self.noise + coefficient * (self.signal - self.noise)
    }
}

/// R-peak indices of a bandpassed single-lead signal, strictly increasing.
pub fn detect_r_peaks(filtered: &[f64], sample_rate: f64, cfg: &QrsConfig) -> RPeaks {
    let n = filtered.len();
    if (n as f64) < cfg.min_duration_secs * sample_rate {
        log::warn!(
            "signal of {n} samples is shorter than {} s; no R-peaks searched",
            cfg.min_duration_secs
        );
        return RPeaks {
            indices: Vec::new(),
            status: RPeakStatus::TooShort,
        };
    }
    let window = ms_to_samples(cfg.integration_ms, sample_rate).max(1);
    let refractory = ms_to_samples(cfg.refractory_ms, sample_rate);
    let refine = ms_to_samples(cfg.refine_ms, sample_rate);
    let ma = integrate(filtered, window);
    let peaks = candidates(&ma, refine.max(1));

    let init_end = ((cfg.init_secs * sample_rate) as usize).clamp(1, n);
    let init_max = ma[..init_end].iter().cloned().fold(0.0, f64::max);
    let init_mean = ma[..init_end].iter().sum::<f64>() / init_end as f64;
    let mut levels = Levels {
        signal: 0.5 * init_max,
        noise: 0.5 * init_mean,
    };

    let a = cfg.adaptation;
    let mut beats: Vec<usize> = Vec::new();
    let mut noise_since_last: Vec<usize> = Vec::new();
    for &p in &peaks {
        if let Some(&last) = beats.last() {
            if p < last + refractory {
                continue;
            }
            if beats.len() >= 2 {
                let recent = &beats[beats.len().saturating_sub(9)..];
                let mean_rr = (recent[recent.len() - 1] - recent[0]) as f64 / (recent.len() - 1) as f64;
                if (p - last) as f64 > cfg.searchback_rr * mean_rr {
                    let th2 = cfg.searchback_factor * levels.threshold(cfg.threshold_coefficient);
                    let best = noise_since_last
                        .iter()
                        .copied()
                        .filter(|&q| q >= last + refractory && q + refractory <= p)
                        .max_by(|x, y| ma[*x].total_cmp(&ma[*y]));
                    if let Some(q) = best.filter(|q| ma[*q] > th2) {
                        beats.push(q);
                        levels.signal = 0.25 * ma[q] + 0.75 * levels.signal;
                        noise_since_last.clear();
                    }
                }
            }
        }
        let h = ma[p];
        if h > levels.threshold(cfg.threshold_coefficient) {
            beats.push(p);
            levels.signal = a * h + (1.0 - a) * levels.signal;
            noise_since_last.clear();
        } else {
            levels.noise = a * h + (1.0 - a) * levels.noise;
            noise_since_last.push(p);
        }
    }

    let mut indices: Vec<usize> = beats
        .iter()
        .map(|&b| {
            let lo = b.saturating_sub(refine);
            let hi = (b + refine + 1).min(n);
            (lo..hi)
                .max_by(|x, y| filtered[*x].abs().total_cmp(&filtered[*y].abs()).then(y.cmp(x)))
                .unwrap_or(b)
        })
        .collect();
    indices.dedup();
    RPeaks {
        indices,
        status: RPeakStatus::Ok,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PWaveConfig {
    /// Window start, milliseconds before the R-peak.
    pub window_start_ms: f64,
    /// Window end, milliseconds before the R-peak.
    pub window_end_ms: f64,
    /// Minimum P amplitude relative to the R amplitude.
    pub amplitude_gate: f64,
}

impl Default for PWaveConfig {
    fn default() -> Self {
        Self {
            window_start_ms: 200.0,
            window_end_ms: 80.0,
            amplitude_gate: 0.05,
        }
    }
}

/// One optional P-wave index per R-peak.
///
/// Beats whose window would start before the signal are reported as absent.
pub fn detect_p_waves(
    filtered: &[f64],
    r_peaks: &[usize],
    sample_rate: f64,
    cfg: &PWaveConfig,
) -> Vec<Option<usize>> {
    let start = ms_to_samples(cfg.window_start_ms, sample_rate);
    let end = ms_to_samples(cfg.window_end_ms, sample_rate);
    r_peaks
        .iter()
        .map(|&r| {
            if r < start || r >= filtered.len() {
                return None;
            }
            let (lo, hi) = (r - start, r - end);
            let p = (lo..=hi).max_by(|a, b| filtered[*a].total_cmp(&filtered[*b]).then(b.cmp(a)))?;
            (filtered[p] > cfg.amplitude_gate * filtered[r]).then_some(p)
        })
        .collect()
}
