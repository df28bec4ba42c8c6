use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ParamStore;
use crate::error::{Error, Result};

/// Warmup-then-decay rate:
/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup_steps: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    (d_model.max(1) as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Defaults to the model's `fc_hidden` when absent.
    pub d_model: Option<usize>,
    pub warmup_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            d_model: None,
            warmup_steps: 4000,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.data_mut(name)?;
            if p.len() != g.len() {
                return Err(Error::shape(
                    "adam",
                    format!("`{name}` has {} values but {} gradients", p.len(), g.len()),
                ));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValMicroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub monitor: Monitor,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            monitor: Monitor::ValLoss,
            patience: 10,
            min_delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive observations without an improvement
/// larger than `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    pub lower_is_better: bool,
    best: Option<f64>,
    best_index: usize,
    seen: usize,
    wait: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64, lower_is_better: bool) -> Self {
        Self {
            patience,
            min_delta,
            lower_is_better,
            best: None,
            best_index: 0,
            seen: 0,
            wait: 0,
        }
    }

    pub fn from_config(cfg: &EarlyStopConfig) -> Self {
        Self::new(cfg.patience, cfg.min_delta, cfg.monitor == Monitor::ValLoss)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Zero-based index of the best observation.
    pub fn best_index(&self) -> usize {
        self.best_index
    }

    /// True when the last observation was a new best.
    pub fn improved(&self) -> bool {
        self.seen > 0 && self.best_index == self.seen - 1
    }

    pub fn observe(&mut self, value: f64) -> StopDecision {
        let better = match self.best {
            None => true,
            Some(b) if self.lower_is_better => b - value > self.min_delta,
            Some(b) => value - b > self.min_delta,
        };
        self.seen += 1;
        if better && value.is_finite() {
            self.best = Some(value);
            self.best_index = self.seen - 1;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        if self.patience > 0 && self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Indices of all samples plus duplicates of minority-class samples (drawn
/// with replacement) until every class matches the largest one.
pub fn oversample_indices(labels: &[usize], class_count: usize, seed: u64) -> Result<Vec<usize>> {
    let mut members = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {class_count} classes")));
        }
        members[l].push(i);
    }
    if let Some(c) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::EmptyClass(c));
    }
    let target = members.iter().map(|m| m.len()).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = (0..labels.len()).collect();
    for m in &members {
        for _ in m.len()..target {
            out.push(*m.choose(&mut rng).expect("non-empty"));
        }
    }
    Ok(out)
}

/// Dataset form of [`oversample_indices`] for single-label data.
pub fn oversample(dataset: &crate::data::Dataset, seed: u64) -> Result<crate::data::Dataset> {
    if dataset.label_mode != crate::data::LabelMode::Single {
        return Err(Error::InvalidArgument("oversampling needs single-label data".into()));
    }
    let labels: Vec<usize> = dataset.records.iter().map(|r| r.labels[0]).collect();
    let idx = oversample_indices(&labels, dataset.class_count, seed)?;
    Ok(dataset.subset(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Init, ParamSpec};
    use crate::tensor::Tensor;

    #[test]
    fn noam_examples() {
        assert_eq!(noam_lr(1, 1, 1), 1.0);
        let v = noam_lr(4000, 512, 4000);
        assert!((v - 6.989e-4).abs() < 1e-6, "{v}");
        let s = 4000f64;
        assert!((s.powf(-0.5) - s * s.powf(-1.5)).abs() < 1e-15);
    }

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::from_specs(&[ParamSpec::weight("w", &[values.len()], Init::Zeros)], 0).unwrap();
        s.set("w", Tensor::from_slice(values)).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_and_zero_rate() {
        let mut p = store(&[0.3, -1.2]);
        let before = p.clone();
        let mut adam = Adam::default();
        let zero = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        adam.step(&mut p, &zero, 0.1).unwrap();
        assert_eq!(p, before);
        let g = BTreeMap::from([("w".to_string(), vec![5.0, -3.0])]);
        adam.step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_constant_gradient_steps_by_rate() {
        let mut p = store(&[0.0, 0.0]);
        let mut adam = Adam::default();
        let g = BTreeMap::from([("w".to_string(), vec![2.5, 2.5])]);
        let lr = 0.01;
        let mut last = p.get("w").unwrap().data().to_vec();
        for _ in 0..500 {
            adam.step(&mut p, &g, lr).unwrap();
            let now = p.get("w").unwrap().data().to_vec();
            let step = last[0] - now[0];
            assert!((step - lr).abs() < 1e-6, "{step}");
            assert_eq!(now[0], now[1]);
            last = now;
        }
    }

    #[test]
    fn early_stop_traces() {
        let run = |vals: &[f64], patience, delta| {
            let mut s = EarlyStopper::new(patience, delta, true);
            let stop_at = vals.iter().position(|v| s.observe(*v) == StopDecision::Stop);
            (stop_at, s.best())
        };
        assert_eq!(run(&[1.0, 0.9, 0.8], 2, 0.0), (None, Some(0.8)));
        assert_eq!(run(&[1.0, 1.0, 1.0], 2, 0.0), (Some(2), Some(1.0)));
        assert_eq!(run(&[1.0, 0.99, 0.995, 0.996], 2, 0.001), (Some(3), Some(0.99)));
    }

    #[test]
    fn oversample_examples() {
        let idx = oversample_indices(&[0, 0, 0, 1], 2, 4).unwrap();
        let ones = idx.iter().filter(|i| **i == 3).count();
        assert_eq!(idx.len(), 6);
        assert_eq!(ones, 3);
        assert_eq!(&idx[..4], &[0, 1, 2, 3]);
        assert_eq!(idx, oversample_indices(&[0, 0, 0, 1], 2, 4).unwrap());
        assert_eq!(oversample_indices(&[0, 1], 2, 0).unwrap(), vec![0, 1]);
        assert!(matches!(oversample_indices(&[0, 0], 2, 0), Err(Error::EmptyClass(1))));
    }
}
