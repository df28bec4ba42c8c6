use std::fs;
use std::path::{Path, PathBuf};

use effecg::data::{Dataset, LabelMode, SplitSpec};
use effecg::model::{Head, ModelConfig};
use effecg::signal::PreprocessConfig;
use effecg::train::{LossKind, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliResult};

pub const RESOLVED_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Directory of `.ecg` record files.
    Multilead,
    /// One beat per CSV row, class index in the last column.
    BeatCsv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: DataFormat,
    /// Sample rate of beat CSV rows.
    pub sample_rate: f64,
    /// Largest label plus one when absent.
    pub class_count: Option<usize>,
    /// Single when every record has exactly one label, otherwise multi.
    pub label_mode: Option<LabelMode>,
    pub drop_abnormal: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: DataFormat::Multilead,
            sample_rate: 125.0,
            class_count: None,
            label_mode: None,
            drop_abnormal: true,
        }
    }
}

/// Everything a run needs. The model, training and split seeds are drawn
/// from `seed` when the config is resolved.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Classes averaged into the CinC score; all classes when absent.
    pub cinc_classes: Option<Vec<usize>>,
    pub outdir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            cinc_classes: None,
            outdir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn derive_seeds(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.model.seed = rng.random();
        self.train.seed = rng.random();
        self.split.seed = rng.random();
    }

    /// Takes leads and class count from the data and checks that head, loss
    /// and label mode agree.
    pub fn fit_to(&mut self, data: &Dataset) -> CliResult<()> {
        if let Some(r) = data.records.first() {
            self.model.leads = r.lead_count();
        }
        self.model.class_count = data.class_count;
        let multi = data.label_mode == LabelMode::Multi;
        if multi && self.model.head == Head::Softmax {
            return Err(usage("multi-label data needs model.head = \"sigmoid\""));
        }
        if multi && self.train.loss.kind == LossKind::CrossEntropy {
            return Err(usage("multi-label data needs train.loss.kind = \"bce\" or \"mse_l2\""));
        }
        if self.model.head == Head::Sigmoid && self.train.loss.kind == LossKind::CrossEntropy {
            return Err(usage("a sigmoid head trains with bce or mse_l2, not cross_entropy"));
        }
        if let Some(c) = &self.cinc_classes {
            if let Some(bad) = c.iter().find(|c| **c >= data.class_count) {
                return Err(usage(format!("cinc class {bad} out of range for {} classes", data.class_count)));
            }
        }
        self.model.validate().map_err(|e| usage(format!("model config: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(RESOLVED_FILE);
        let text = serde_json::to_string_pretty(self).map_err(effecg::Error::from)?;
        fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> crate::error::CliError {
    effecg::Error::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}
