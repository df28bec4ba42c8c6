//! ECG preprocessing and fiducial-point extraction.

mod fiducial;
mod fir;
mod qrs;
mod synth;

pub use fiducial::{clip_pad, FiducialFeature, PAD_VALUE};
pub use fir::{apply_filter, design_bandpass, standardize, FirFilter};
pub use qrs::{detect_p_waves, detect_r_peaks, PWaveConfig, QrsConfig, RPeaks, RPeakStatus};
pub use synth::{synth_ecg, SynthConfig, SynthTruth};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

impl Gender {
    /// Embedding vocabulary index: female 0, male 1.
    pub fn index(self) -> usize {
        match self {
            Gender::Female => 0,
            Gender::Male => 1,
        }
    }

    pub fn code(self) -> char {
        match self {
            Gender::Female => 'F',
            Gender::Male => 'M',
        }
    }
}

/// One multi-lead recording with optional demographics and a label set.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    /// `leads[c][t]`, millivolts.
    pub leads: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub age: Option<u32>,
    pub gender: Option<Gender>,
    /// Sorted, deduplicated class indices.
    pub labels: Vec<usize>,
}

impl EcgRecord {
    pub fn new(
        leads: Vec<Vec<f64>>,
        sample_rate: f64,
        age: Option<u32>,
        gender: Option<Gender>,
        mut labels: Vec<usize>,
    ) -> Result<Self> {
        if leads.is_empty() || leads[0].is_empty() {
            return Err(Error::InvalidArgument(
                "a record needs at least one lead and one sample".into(),
            ));
        }
        let n = leads[0].len();
        if let Some((i, l)) = leads.iter().enumerate().find(|(_, l)| l.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "lead {i} has {} samples, lead 0 has {n}",
                l.len()
            )));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        labels.sort_unstable();
        labels.dedup();
        Ok(Self {
            leads,
            sample_rate,
            age,
            gender,
            labels,
        })
    }

    pub fn lead_count(&self) -> usize {
        self.leads.len()
    }

    pub fn len(&self) -> usize {
        self.leads[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.leads[0].is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Checks every label against the configured class count.
    pub fn check_labels(&self, class_count: usize) -> Result<()> {
        match self.labels.iter().find(|l| **l >= class_count) {
            Some(l) => Err(Error::InvalidArgument(format!(
                "label {l} out of range for {class_count} classes"
            ))),
            None => Ok(()),
        }
    }

    /// True when any sample is non-finite or any lead has zero variance.
    pub fn is_abnormal(&self) -> bool {
        self.leads.iter().any(|lead| {
            if lead.iter().any(|v| !v.is_finite()) {
                return true;
            }
            let first = lead[0];
            lead.iter().all(|v| *v == first)
        })
    }
}

/// Preprocessing chain applied to every record before it reaches the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Odd tap count; `None` picks `0.4 s * fs` rounded up to odd.
    pub taps: Option<usize>,
    /// Lead used for fiducial detection.
    pub reference_lead: usize,
    pub qrs: QrsConfig,
    pub p_wave: PWaveConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            low_hz: 3.0,
            high_hz: 45.0,
            taps: None,
            reference_lead: 0,
            qrs: QrsConfig::default(),
            p_wave: PWaveConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn taps_for(&self, sample_rate: f64) -> usize {
        self.taps
            .unwrap_or_else(|| ((0.4 * sample_rate).round() as usize) | 1)
            .max(3)
    }
}

/// Filtered, standardized leads plus the detected fiducial indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub leads: Vec<Vec<f64>>,
    pub r_peaks: Vec<usize>,
    pub p_waves: Vec<usize>,
    pub r_status: RPeakStatus,
}

/// Bandpass and standardize every lead, then detect R-peaks and P-waves on
/// the reference lead of the filtered signal.
pub fn preprocess(record: &EcgRecord, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let fs = record.sample_rate;
    let filter = design_bandpass(cfg.low_hz, cfg.high_hz, fs, cfg.taps_for(fs))?;
    let filtered: Vec<Vec<f64>> = record
        .leads
        .iter()
        .map(|lead| apply_filter(lead, &filter))
        .collect();
    let reference = filtered.get(cfg.reference_lead).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "reference lead {} but record has {} leads",
            cfg.reference_lead,
            record.lead_count()
        ))
    })?;
    let r = detect_r_peaks(reference, fs, &cfg.qrs);
    let p_waves = detect_p_waves(reference, &r.indices, fs, &cfg.p_wave)
        .into_iter()
        .flatten()
        .collect();
    Ok(Preprocessed {
        leads: filtered.iter().map(|l| standardize(l)).collect(),
        r_peaks: r.indices,
        p_waves,
        r_status: r.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_rejects_ragged_leads_and_bad_rate() {
        assert!(EcgRecord::new(vec![vec![0.0; 3], vec![0.0; 2]], 500.0, None, None, vec![]).is_err());
        assert!(EcgRecord::new(vec![vec![0.0; 3]], 0.0, None, None, vec![]).is_err());
        assert!(EcgRecord::new(vec![], 500.0, None, None, vec![]).is_err());
        let r = EcgRecord::new(vec![vec![0.0, 1.0]], 500.0, None, None, vec![3, 1, 3]).unwrap();
        assert_eq!(r.labels, vec![1, 3]);
        assert!(r.check_labels(4).is_ok());
        assert!(r.check_labels(3).is_err());
    }

    #[test]
    fn abnormal_records() {
        let flat = EcgRecord::new(vec![vec![1.0; 4]], 100.0, None, None, vec![]).unwrap();
        assert!(flat.is_abnormal());
        let nan = EcgRecord::new(vec![vec![1.0, f64::NAN]], 100.0, None, None, vec![]).unwrap();
        assert!(nan.is_abnormal());
        let ok = EcgRecord::new(vec![vec![1.0, 2.0]], 100.0, None, None, vec![]).unwrap();
        assert!(!ok.is_abnormal());
    }

    #[test]
    fn default_taps() {
        let cfg = PreprocessConfig::default();
        assert_eq!(cfg.taps_for(500.0), 201);
        assert_eq!(cfg.taps_for(125.0), 51);
    }
}
