use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelMode};
use crate::error::{Error, Result};
use crate::signal::{synth_ecg, EcgRecord, Gender, SynthConfig, SynthTruth};

/// Labelled synthetic records.
///
/// Single-label: class `c` sets the heart rate near `55 + 35 c` bpm and odd
/// classes have no P wave. Multi-label (three classes): class 0 means age of
/// 60 or more, class 1 means male, class 2 means a fast rhythm; only the last
/// is visible in the waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDatasetConfig {
    pub count: usize,
    pub class_count: usize,
    pub multi_label: bool,
    pub leads: usize,
    pub sample_rate: f64,
    pub duration_secs: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            count: 32,
            class_count: 2,
            multi_label: false,
            leads: 1,
            sample_rate: 125.0,
            duration_secs: 4.0,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

pub fn synth_dataset(cfg: &SynthDatasetConfig) -> Result<(Dataset, Vec<SynthTruth>)> {
    if cfg.multi_label && cfg.class_count != 3 {
        return Err(Error::InvalidArgument(
            "multi-label synthetic data has exactly 3 classes (age, gender, rhythm)".into(),
        ));
    }
    if cfg.class_count == 0 || cfg.duration_secs <= 0.0 {
        return Err(Error::InvalidArgument("class_count and duration must be positive".into()));
    }
    let n = (cfg.duration_secs * cfg.sample_rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.count);
    let mut truths = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let age: u32 = rng.random_range(20..90);
        let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
        let (bpm, p_amplitude, labels) = if cfg.multi_label {
            let fast = rng.random_bool(0.5);
            let bpm = if fast { rng.random_range(110.0..130.0) } else { rng.random_range(55.0..75.0) };
            let mut labels = Vec::new();
            if age >= 60 {
                labels.push(0);
            }
            if gender == Gender::Male {
                labels.push(1);
            }
            if fast {
                labels.push(2);
            }
            (bpm, 0.15, labels)
        } else {
            let c = i % cfg.class_count;
            let bpm = (55.0 + 35.0 * c as f64 + rng.random_range(-5.0..5.0)).min(210.0);
            let p = if c % 2 == 0 { 0.15 } else { 0.0 };
            (bpm, p, vec![c])
        };
        let beats = (cfg.duration_secs * bpm / 60.0).ceil() as usize + 1;
        let mut sc = SynthConfig::new(beats, bpm, cfg.sample_rate);
        sc.noise_std = cfg.noise_std;
        sc.p_amplitude = p_amplitude;
        sc.leads = cfg.leads;
        sc.seed = rng.random();
        let (rec, truth) = synth_ecg(&sc)?;
        let leads = rec
            .leads
            .into_iter()
            .map(|mut l| {
                l.resize(n, 0.0);
                l
            })
            .collect();
        records.push(EcgRecord::new(leads, cfg.sample_rate, Some(age), Some(gender), labels)?);
        let keep: Vec<usize> = (0..truth.r_peaks.len()).filter(|b| truth.r_peaks[*b] < n).collect();
        truths.push(SynthTruth {
            r_peaks: keep.iter().map(|b| truth.r_peaks[*b]).collect(),
            p_waves: keep.iter().map(|b| truth.p_waves[*b]).collect(),
        });
    }
    let mode = if cfg.multi_label { LabelMode::Multi } else { LabelMode::Single };
    let dataset = Dataset::new(records, cfg.class_count, mode, format!("synthetic(seed={})", cfg.seed))?;
    Ok((dataset, truths))
}
