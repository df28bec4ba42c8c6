use std::fmt::Write as _;
use std::path::Path;

use effecg::data::{load_beat_csv, load_multilead, record_files, Dataset, LabelMode};

use crate::config::{DataConfig, DataFormat};
use crate::error::{usage, CliResult};

/// A dataset with one display name per record.
pub struct Loaded {
    pub dataset: Dataset,
    pub names: Vec<String>,
}

pub fn load(cfg: &DataConfig) -> CliResult<Loaded> {
    let path = cfg
        .path
        .as_deref()
        .ok_or_else(|| usage("no data path: pass --data or set data.path in the config"))?;
    let (records, names, provenance) = match cfg.format {
        DataFormat::Multilead => {
            let files = record_files(path)?;
            let names = files
                .iter()
                .map(|f| f.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()))
                .collect();
            let records = {
                use rayon::prelude::*;
                files.par_iter().map(|f| load_multilead(f)).collect::<effecg::Result<Vec<_>>>()?
            };
            (records, names, path.display().to_string())
        }
        DataFormat::BeatCsv => {
            let d = load_beat_csv(path, cfg.sample_rate)?;
            let names = (0..d.len()).map(|i| format!("row{}", i + 1)).collect();
            (d.records, names, d.provenance)
        }
    };
    if records.is_empty() {
        return Err(effecg::Error::InvalidArgument(format!("{}: no records", path.display())).into());
    }
    let seen = records.iter().flat_map(|r| r.labels.iter()).max().map_or(0, |m| m + 1);
    let mode = cfg.label_mode.unwrap_or(if records.iter().all(|r| r.labels.len() == 1) {
        LabelMode::Single
    } else {
        LabelMode::Multi
    });
    let dataset = Dataset::new(records, cfg.class_count.unwrap_or(seen), mode, provenance)?;
    let mut loaded = Loaded { dataset, names };
    if cfg.drop_abnormal {
        loaded.drop_abnormal();
    }
    Ok(loaded)
}

impl Loaded {
    fn drop_abnormal(&mut self) {
        let keep: Vec<bool> = self.dataset.records.iter().map(|r| !r.is_abnormal()).collect();
        if keep.iter().all(|k| *k) {
            return;
        }
        let mut k = keep.iter();
        self.names.retain(|_| *k.next().unwrap_or(&true));
        self.dataset.drop_abnormal();
    }
}

/// `record,kind,sample` rows.
pub fn fiducial_csv(rows: &[(String, Vec<usize>, Vec<usize>)]) -> String {
    let mut out = String::from("record,kind,sample\n");
    for (name, r, p) in rows {
        for i in r {
            let _ = writeln!(out, "{name},r_peak,{i}");
        }
        for i in p {
            let _ = writeln!(out, "{name},p_wave,{i}");
        }
    }
    out
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::config::io_error(dir, e))
}

pub fn write(path: &Path, text: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| crate::config::io_error(path, e))
}

/// One value for every class, or exactly `k` comma-separated values.
pub fn parse_thresholds(text: &str, k: usize) -> CliResult<Vec<f64>> {
    let values = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|t| (0.0..=1.0).contains(t))
                .ok_or_else(|| usage(format!("threshold `{v}` is not a number in [0, 1]")))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    match values.len() {
        1 => Ok(vec![values[0]; k]),
        n if n == k => Ok(values),
        n => Err(usage(format!("{n} thresholds for {k} classes"))),
    }
}
