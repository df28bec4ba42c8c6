use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear-phase FIR bandpass designed by the windowed-sinc method.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    pub coefficients: Vec<f64>,
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate: f64,
}

impl FirFilter {
    /// `|H(f)|` evaluated directly from the impulse response.
    pub fn magnitude_at(&self, hz: f64) -> f64 {
        let w = 2.0 * PI * hz / self.sample_rate;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, c) in self.coefficients.iter().enumerate() {
            re += c * (w * n as f64).cos();
            im -= c * (w * n as f64).sin();
        }
        re.hypot(im)
    }

    pub fn group_delay(&self) -> usize {
        (self.coefficients.len() - 1) / 2
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Hamming-windowed sinc bandpass, scaled to unit gain at the band centre.
pub fn design_bandpass(low_hz: f64, high_hz: f64, sample_rate: f64, taps: usize) -> Result<FirFilter> {
    if taps % 2 == 0 || taps < 3 {
        return Err(Error::InvalidArgument(format!(
            "tap count must be odd and at least 3, got {taps}"
        )));
    }
    if !(0.0 < low_hz && low_hz < high_hz && high_hz < sample_rate / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "band edges must satisfy 0 < {low_hz} < {high_hz} < {}",
            sample_rate / 2.0
        )));
    }
    let f1 = low_hz / sample_rate;
    let f2 = high_hz / sample_rate;
    let mid = (taps - 1) as f64 / 2.0;
    let window: Vec<f64> = (0..taps)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (taps - 1) as f64).cos())
        .collect();
    // each lowpass is normalised to unit DC gain so their difference has none
    let lowpass = |fc: f64| -> Vec<f64> {
        let h: Vec<f64> = (0..taps)
            .map(|n| window[n] * 2.0 * fc * sinc(2.0 * fc * (n as f64 - mid)))
            .collect();
        let dc: f64 = h.iter().sum();
        h.into_iter().map(|v| v / dc).collect()
    };
    let coefficients: Vec<f64> = lowpass(f2)
        .into_iter()
        .zip(lowpass(f1))
        .map(|(a, b)| a - b)
        .collect();
    let mut filter = FirFilter {
        coefficients,
        low_hz,
        high_hz,
        sample_rate,
    };
    let gain = filter.magnitude_at((low_hz + high_hz) / 2.0);
    filter.coefficients.iter_mut().for_each(|c| *c /= gain);
    // keep exact symmetry after scaling
    let n = filter.coefficients.len();
    for i in 0..n / 2 {
        filter.coefficients[n - 1 - i] = filter.coefficients[i];
    }
    Ok(filter)
}

/// Zero-phase filtering: direct-form convolution shifted by the group delay,
/// with zeros outside the signal. Output length equals input length.
pub fn apply_filter(signal: &[f64], filter: &FirFilter) -> Vec<f64> {
    let h = &filter.coefficients;
    let delay = filter.group_delay() as isize;
    let n = signal.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, c) in h.iter().enumerate() {
                let j = i + delay - k as isize;
                if j >= 0 && j < n {
                    acc += c * signal[j as usize];
                }
            }
            acc
        })
        .collect()
}

/// Z-score with population standard deviation; constant input maps to zeros.
pub fn standardize(signal: &[f64]) -> Vec<f64> {
    if signal.is_empty() {
        return Vec::new();
    }
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    signal.iter().map(|v| (v - mean) / sd).collect()
}
