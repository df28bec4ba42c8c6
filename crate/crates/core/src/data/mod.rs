//! Datasets: loading, cleaning, splitting, batching and distribution tables.

mod analysis;
mod io;
mod synth;

pub use analysis::{analyze_distribution, DistributionTable};
pub use io::{
    format_multilead, load_beat_csv, load_multilead, load_multilead_dir, parse_beat_csv, parse_multilead,
    record_files, write_multilead, RECORD_EXTENSION,
};
pub use synth::{synth_dataset, SynthDatasetConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::signal::{clip_pad, preprocess, EcgRecord, Gender, PreprocessConfig, PAD_VALUE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Exactly one class per record.
    Single,
    /// Any subset of classes per record.
    Multi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<EcgRecord>,
    pub class_count: usize,
    pub label_mode: LabelMode,
    /// Where the records came from (path or generator).
    pub provenance: String,
}

impl Dataset {
    /// Checks label ranges, the label mode, and uniform sample rate and lead
    /// count.
    pub fn new(
        records: Vec<EcgRecord>,
        class_count: usize,
        label_mode: LabelMode,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if let Some(first) = records.first() {
            for (i, r) in records.iter().enumerate() {
                if r.sample_rate != first.sample_rate || r.lead_count() != first.lead_count() {
                    return Err(Error::InvalidArgument(format!(
                        "record {i} has {} leads at {} Hz; record 0 has {} leads at {} Hz",
                        r.lead_count(),
                        r.sample_rate,
                        first.lead_count(),
                        first.sample_rate
                    )));
                }
                r.check_labels(class_count)
                    .map_err(|e| Error::InvalidArgument(format!("record {i}: {e}")))?;
                if label_mode == LabelMode::Single && r.labels.len() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "record {i} has {} labels in single-label mode",
                        r.labels.len()
                    )));
                }
            }
        }
        Ok(Self {
            records,
            class_count,
            label_mode,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records per class (a multi-label record counts once per label).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for r in &self.records {
            for l in &r.labels {
                counts[*l] += 1;
            }
        }
        counts
    }

    /// Subset in the given order; indices may repeat.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|i| self.records[*i].clone()).collect(),
            class_count: self.class_count,
            label_mode: self.label_mode,
            provenance: self.provenance.clone(),
        }
    }

    /// Removes records with non-finite samples or a flat lead, returning the
    /// number dropped.
    pub fn drop_abnormal(&mut self) -> usize {
        let before = self.records.len();
        self.records.retain(|r| !r.is_abnormal());
        let dropped = before - self.records.len();
        if dropped > 0 {
            log::info!("dropped {dropped} abnormal records from {}", self.provenance);
        }
        dropped
    }
}

/// Train/validation/test ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    /// Split each class separately (single-label data only).
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
            stratify: true,
        }
    }
}

fn partition(n: usize, spec: &SplitSpec) -> (usize, usize) {
    let train = ((n as f64 * spec.train).round() as usize).min(n);
    let val = ((n as f64 * spec.val).round() as usize).min(n - train);
    (train, val)
}

/// Index sets of a seeded split; the three sets are disjoint and cover
/// `0..dataset.len()`.
pub fn split_indices(dataset: &Dataset, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    let ratios = [spec.train, spec.val, spec.test];
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    if spec.stratify && dataset.label_mode == LabelMode::Single {
        let mut by_class = vec![Vec::new(); dataset.class_count];
        for (i, r) in dataset.records.iter().enumerate() {
            by_class[r.labels[0]].push(i);
        }
        by_class.retain(|g| !g.is_empty());
        if let Some(small) = by_class.iter().find(|g| g.len() < 3) {
            log::warn!(
                "class {} has only {} samples; falling back to an unstratified split",
                dataset.records[small[0]].labels[0],
                small.len()
            );
        } else {
            groups = by_class;
        }
    }
    if groups.is_empty() {
        groups.push((0..dataset.len()).collect());
    }
    let mut out: [Vec<usize>; 3] = Default::default();
    for mut g in groups {
        g.shuffle(&mut rng);
        let (train, val) = partition(g.len(), spec);
        out[0].extend_from_slice(&g[..train]);
        out[1].extend_from_slice(&g[train..train + val]);
        out[2].extend_from_slice(&g[train + val..]);
    }
    Ok(out)
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(dataset, spec)?;
    Ok((dataset.subset(&a), dataset.subset(&b), dataset.subset(&c)))
}

/// `per_class` records of every class sampled without replacement.
pub fn balanced_subset(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    if dataset.label_mode != LabelMode::Single {
        return Err(Error::InvalidArgument("balanced subsets need single-label data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for c in 0..dataset.class_count {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|i| dataset.records[*i].labels[0] == c)
            .collect();
        if members.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} records, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    Ok(dataset.subset(&chosen))
}

/// Seeded shuffle of `0..n` cut into batches; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// A record after preprocessing, cut or zero-padded to the model length.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `leads x input_length`, lead-major.
    pub signal: Vec<f64>,
    pub r_peaks: Vec<usize>,
    pub p_waves: Vec<usize>,
    pub age: Option<u32>,
    pub gender: Option<Gender>,
    pub labels: Vec<usize>,
}

/// Model-ready samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub samples: Vec<Sample>,
    pub leads: usize,
    pub input_length: usize,
    pub class_count: usize,
    pub label_mode: LabelMode,
}

/// Preprocesses every record (in parallel, order preserved).
pub fn prepare(dataset: &Dataset, cfg: &PreprocessConfig, input_length: usize) -> Result<Prepared> {
    use rayon::prelude::*;
    let samples = dataset
        .records
        .par_iter()
        .map(|r| {
            let p = preprocess(r, cfg)?;
            let mut signal = Vec::with_capacity(r.lead_count() * input_length);
            for lead in &p.leads {
                let keep = lead.len().min(input_length);
                signal.extend_from_slice(&lead[..keep]);
                signal.extend(std::iter::repeat_n(0.0, input_length - keep));
            }
            Ok(Sample {
                signal,
                r_peaks: p.r_peaks.into_iter().filter(|i| *i < input_length).collect(),
                p_waves: p.p_waves.into_iter().filter(|i| *i < input_length).collect(),
                age: r.age,
                gender: r.gender,
                labels: r.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        samples,
        leads: dataset.records.first().map_or(0, |r| r.lead_count()),
        input_length,
        class_count: dataset.class_count,
        label_mode: dataset.label_mode,
    })
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|i| self.samples[*i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            samples: Vec::new(),
            leads: self.leads,
            input_length: self.input_length,
            class_count: self.class_count,
            label_mode: self.label_mode,
        }
    }

    /// Model input for the samples at `indices`; fiducial sequences are padded
    /// to the longest one in the batch.
    pub fn batch(&self, indices: &[usize]) -> Result<ModelInput> {
        let b = indices.len();
        let mut signals = Vec::with_capacity(b * self.leads * self.input_length);
        let picked: Vec<&Sample> = indices.iter().map(|i| &self.samples[*i]).collect();
        for s in &picked {
            signals.extend_from_slice(&s.signal);
        }
        let r_len = picked.iter().map(|s| s.r_peaks.len()).max().unwrap_or(0);
        let p_len = picked.iter().map(|s| s.p_waves.len()).max().unwrap_or(0);
        Ok(ModelInput {
            signals: Tensor::new(vec![b, self.leads, self.input_length], signals)?,
            r_peaks: picked.iter().map(|s| clip_pad(&s.r_peaks, r_len, PAD_VALUE)).collect(),
            p_waves: picked.iter().map(|s| clip_pad(&s.p_waves, p_len, PAD_VALUE)).collect(),
            ages: picked.iter().map(|s| s.age).collect(),
            genders: picked.iter().map(|s| s.gender).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(labels: &[usize]) -> Dataset {
        let records = labels
            .iter()
            .enumerate()
            .map(|(i, l)| EcgRecord::new(vec![vec![i as f64, -1.0]], 125.0, None, None, vec![*l]).unwrap())
            .collect();
        Dataset::new(records, 2, LabelMode::Single, "test").unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = dataset(&[0; 10]);
        let spec = SplitSpec {
            stratify: false,
            ..SplitSpec::default()
        };
        let [a, b, c] = split_indices(&d, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split_indices(&d, &spec).unwrap(), [a.clone(), b, c]);
        let other = split_indices(&d, &SplitSpec { seed: 5, ..spec }).unwrap();
        assert_ne!(other[0], a);
    }

    #[test]
    fn stratified_split_per_class() {
        let mut labels = vec![0; 20];
        labels.extend(vec![1; 10]);
        let d = dataset(&labels);
        let (train, val, test) = split(&d, &SplitSpec::default()).unwrap();
        assert_eq!(train.class_counts(), vec![16, 8]);
        assert_eq!(val.class_counts(), vec![2, 1]);
        assert_eq!(test.class_counts(), vec![2, 1]);
    }

    #[test]
    fn split_partitions_dataset() {
        let d = dataset(&[0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0]);
        let [a, b, c] = split_indices(&d, &SplitSpec::default()).unwrap();
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn bad_ratios_rejected() {
        let d = dataset(&[0; 4]);
        let spec = SplitSpec {
            train: 0.5,
            ..SplitSpec::default()
        };
        assert!(split(&d, &spec).is_err());
    }

    #[test]
    fn batches() {
        let b = make_batches(10, 4, 3).unwrap();
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, make_batches(10, 4, 3).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(make_batches(3, 0, 0).is_err());
    }

    #[test]
    fn batch_pads_fiducials_to_longest() {
        let sample = |r: Vec<usize>| Sample {
            signal: vec![0.0; 8],
            r_peaks: r,
            p_waves: vec![],
            age: None,
            gender: None,
            labels: vec![0],
        };
        let prep = Prepared {
            samples: vec![sample(vec![1, 2, 3]), sample(vec![1, 2, 3, 4, 5])],
            leads: 1,
            input_length: 8,
            class_count: 1,
            label_mode: LabelMode::Single,
        };
        let input = prep.batch(&[0, 1]).unwrap();
        assert_eq!(input.r_peaks[0].mask, vec![true, true, true, false, false]);
        assert_eq!(input.r_peaks[1].mask, vec![true; 5]);
        assert_eq!(input.p_waves[0].len(), 0);
        assert_eq!(input.signals.shape(), &[2, 1, 8]);
    }

    #[test]
    fn drop_abnormal_counts() {
        let mut d = dataset(&[0, 1]);
        d.records.push(EcgRecord::new(vec![vec![2.0, 2.0]], 125.0, None, None, vec![0]).unwrap());
        d.records.push(EcgRecord::new(vec![vec![f64::NAN, 2.0]], 125.0, None, None, vec![0]).unwrap());
        assert_eq!(d.drop_abnormal(), 2);
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn balanced_subset_without_replacement() {
        let d = dataset(&[0, 0, 0, 1, 1]);
        let s = balanced_subset(&d, 2, 1).unwrap();
        assert_eq!(s.class_counts(), vec![2, 2]);
        assert!(balanced_subset(&d, 3, 1).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let a = EcgRecord::new(vec![vec![0.0, 1.0]], 125.0, None, None, vec![0]).unwrap();
        let b = EcgRecord::new(vec![vec![0.0, 1.0]], 500.0, None, None, vec![0]).unwrap();
        assert!(Dataset::new(vec![a.clone(), b], 1, LabelMode::Single, "x").is_err());
        assert!(Dataset::new(vec![a.clone()], 0, LabelMode::Single, "x").is_err());
        let multi = EcgRecord::new(vec![vec![0.0, 1.0]], 125.0, None, None, vec![0, 1]).unwrap();
        assert!(Dataset::new(vec![multi.clone()], 2, LabelMode::Single, "x").is_err());
        assert!(Dataset::new(vec![multi], 2, LabelMode::Multi, "x").is_ok());
    }
}
