use std::path::{Path, PathBuf};

use effecg::data::{analyze_distribution, format_multilead, prepare, split_indices, synth_dataset, Prepared, SynthDatasetConfig};
use effecg::metrics::{evaluate, roc_csv, svg_confusion, svg_line_chart, svg_roc};
use effecg::model::{load_checkpoint, predict, save_checkpoint, Model};
use effecg::signal::{preprocess, synth_ecg, EcgRecord, RPeakStatus, SynthConfig};
use effecg::train::gradcheck::{run_suite, SuiteOptions};
use effecg::train::{history_csv, predict_scores, resolve_thresholds, train_loop, HistoryRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, RunConfig};
use crate::error::{usage, CliError, CliResult};
use crate::inputs::{self, ensure_dir, fiducial_csv, parse_thresholds, write};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
const EVAL_CHUNK: usize = 64;

pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub beats: usize,
    pub bpm: f64,
    pub fs: f64,
    pub noise: f64,
    pub leads: usize,
    pub classes: Option<usize>,
    pub multi_label: bool,
    pub duration: Option<f64>,
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    if !(30.0..=220.0).contains(&a.bpm) {
        return Err(usage(format!("--bpm must lie in [30, 220], got {}", a.bpm)));
    }
    if !(a.fs > 0.0) || a.beats == 0 || a.leads == 0 || !(a.noise >= 0.0) {
        return Err(usage("--fs, --beats and --leads must be positive and --noise non-negative"));
    }
    ensure_dir(&a.out)?;
    let records: Vec<(EcgRecord, Vec<usize>, Vec<usize>)> = match a.classes {
        Some(class_count) => {
            let cfg = SynthDatasetConfig {
                count: a.count,
                class_count,
                multi_label: a.multi_label,
                leads: a.leads,
                sample_rate: a.fs,
                duration_secs: a.duration.unwrap_or(a.beats as f64 * 60.0 / a.bpm),
                noise_std: a.noise,
                seed: a.seed,
            };
            let (data, truths) = synth_dataset(&cfg).map_err(|e| usage(e.to_string()))?;
            data.records
                .into_iter()
                .zip(truths)
                .map(|(r, t)| (r, t.r_peaks, t.p_waves.into_iter().flatten().collect()))
                .collect()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            (0..a.count)
                .map(|_| {
                    let mut sc = SynthConfig::new(a.beats, a.bpm, a.fs);
                    sc.noise_std = a.noise;
                    sc.leads = a.leads;
                    sc.seed = rng.random();
                    let (r, t) = synth_ecg(&sc)?;
                    Ok((r, t.r_peaks, t.p_waves.into_iter().flatten().collect()))
                })
                .collect::<effecg::Result<_>>()?
        }
    };
    let mut sidecar = Vec::with_capacity(records.len());
    for (i, (rec, r, p)) in records.into_iter().enumerate() {
        let name = format!("rec{i:04}");
        write(&a.out.join(format!("{name}.ecg")), format_multilead(&rec))?;
        sidecar.push((name, r, p));
    }
    write(&a.out.join("fiducials.csv"), fiducial_csv(&sidecar))?;
    println!("wrote {} records to {}", sidecar.len(), a.out.display());
    Ok(())
}

pub fn preprocess_cmd(config: Option<&Path>, data: Option<PathBuf>, outdir: &Path) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if data.is_some() {
        cfg.data.path = data;
    }
    let loaded = inputs::load(&cfg.data)?;
    ensure_dir(outdir)?;
    let mut rows = Vec::with_capacity(loaded.names.len());
    for (name, rec) in loaded.names.iter().zip(&loaded.dataset.records) {
        let p = preprocess(rec, &cfg.preprocess)?;
        if p.r_status == RPeakStatus::TooShort {
            log::warn!("{name}: too short for R-peak detection");
        }
        let out = EcgRecord::new(p.leads, rec.sample_rate, rec.age, rec.gender, rec.labels.clone())?;
        write(&outdir.join(format!("{name}.ecg")), format_multilead(&out))?;
        rows.push((name.clone(), p.r_peaks, p.p_waves));
    }
    write(&outdir.join("fiducials.csv"), fiducial_csv(&rows))?;
    println!("preprocessed {} records into {}", rows.len(), outdir.display());
    Ok(())
}

fn chart(rows: &[HistoryRow], title: &str, y_label: &str, series: &[(&str, fn(&HistoryRow) -> Option<f64>)]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(name, f)| {
            let pts = rows.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect();
            (name.to_string(), pts)
        })
        .filter(|(_, pts): &(String, Vec<_>)| !pts.is_empty())
        .collect();
    svg_line_chart(title, "epoch", y_label, &series)
}

fn write_history(outdir: &Path, rows: &[HistoryRow]) -> CliResult<()> {
    write(&outdir.join(HISTORY_FILE), history_csv(rows))?;
    let loss = chart(rows, "Loss", "loss", &[("train", |r| Some(r.train_loss)), ("val", |r| r.val_loss)]);
    write(&outdir.join("loss.svg"), loss)?;
    let f1 = chart(rows, "Validation micro-F1", "micro-F1", &[("val", |r| r.val_micro_f1)]);
    write(&outdir.join("micro_f1.svg"), f1)
}

pub fn train(config: Option<&Path>, data: Option<PathBuf>, outdir: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if data.is_some() {
        cfg.data.path = data;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.outdir = Some(outdir.to_path_buf());
    cfg.derive_seeds();
    let loaded = inputs::load(&cfg.data)?;
    cfg.fit_to(&loaded.dataset)?;
    resolve_thresholds(&cfg.train, cfg.model.class_count).map_err(|e| usage(e.to_string()))?;
    ensure_dir(outdir)?;
    cfg.write_resolved(outdir)?;

    let prepared = prepare(&loaded.dataset, &cfg.preprocess, cfg.model.input_length)?;
    let [tr, va, _] = split_indices(&loaded.dataset, &cfg.split)?;
    let train_set = prepared.subset(&tr);
    let val_set = prepared.subset(&va);
    log::info!("{} train / {} val records", train_set.len(), val_set.len());
    let mut model = Model::build(cfg.model.clone()).map_err(|e| usage(format!("model config: {e}")))?;

    let mut rows = Vec::new();
    let outcome = train_loop(
        &mut model,
        &train_set,
        (!val_set.is_empty()).then_some(&val_set),
        &cfg.train,
        |row| {
            log::info!(
                "epoch {} step {} lr {:.3e} train {:.5} val {:?} f1 {:?}",
                row.epoch,
                row.step,
                row.lrate,
                row.train_loss,
                row.val_loss,
                row.val_micro_f1
            );
            rows.push(row.clone());
        },
    );
    write_history(outdir, &rows)?;
    let outcome = outcome?;
    save_checkpoint(&model, &outdir.join(CHECKPOINT_FILE))?;
    let best = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch);
    println!(
        "trained {} epochs ({} steps{}); kept epoch {}{}",
        outcome.history.len(),
        outcome.steps,
        if outcome.stopped_early { ", stopped early" } else { "" },
        outcome.best_epoch,
        best.and_then(|r| r.val_micro_f1)
            .map_or(String::new(), |f| format!(", val micro-F1 {f:.4}"))
    );
    Ok(())
}

/// Which part of the configured split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

fn model_data(model: &Model, data_cfg: &DataConfig) -> CliResult<inputs::Loaded> {
    let mc = model.config();
    let mut dc = data_cfg.clone();
    dc.class_count.get_or_insert(mc.class_count);
    let loaded = inputs::load(&dc)?;
    let d = &loaded.dataset;
    let leads = d.records.first().map_or(0, |r| r.lead_count());
    if leads != mc.leads || d.class_count != mc.class_count {
        return Err(effecg::Error::InvalidArgument(format!(
            "shape mismatch: model expects {} leads x {} samples and {} classes; data has {} leads x {} samples and {} classes",
            mc.leads,
            mc.input_length,
            mc.class_count,
            leads,
            d.records.first().map_or(0, |r| r.len()),
            d.class_count
        ))
        .into());
    }
    Ok(loaded)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub subset: Subset,
    pub thresholds: Option<String>,
    pub report: PathBuf,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if a.data.is_some() {
        cfg.data.path = a.data.clone();
    }
    if a.subset != Subset::All && a.config.is_none() {
        return Err(usage("--subset needs the run's --config to recover the split"));
    }
    let loaded = model_data(&model, &cfg.data)?;
    let prepared = prepare(&loaded.dataset, &cfg.preprocess, model.config().input_length)?;
    let data = match a.subset {
        Subset::All => prepared,
        s => {
            let parts = split_indices(&loaded.dataset, &cfg.split)?;
            prepared.subset(&parts[s as usize - 1])
        }
    };
    if data.is_empty() {
        return Err(effecg::Error::InvalidArgument("the selected subset is empty".into()).into());
    }
    let k = model.config().class_count;
    let thresholds = match &a.thresholds {
        Some(t) => parse_thresholds(t, k)?,
        None => resolve_thresholds(&cfg.train, k).map_err(|e| usage(e.to_string()))?,
    };
    let scores = predict_scores(&model, &data, EVAL_CHUNK)?;
    let (report, curves) = evaluate(
        &scores,
        &data.labels(),
        model.config().head,
        &thresholds,
        cfg.cinc_classes.as_deref(),
        model.parameter_count(),
    )?;
    let dir = a.report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    ensure_dir(dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(effecg::Error::from)?;
    write(&a.report, json + "\n")?;
    write(&dir.join("roc.csv"), roc_csv(&curves))?;
    write(&dir.join("roc.svg"), svg_roc(&curves))?;
    if let Some(cm) = &report.confusion {
        write(&dir.join("confusion.svg"), svg_confusion(cm))?;
    }
    println!(
        "{} samples: micro-F1 {:.4}, macro-F1 {:.4}, accuracy {:.4}, CinC {:.4}",
        report.sample_count, report.micro_f1, report.macro_f1, report.accuracy, report.cinc_score
    );
    Ok(())
}

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub thresholds: Option<String>,
    pub outdir: PathBuf,
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.data.path = Some(a.data.clone());
    cfg.data.label_mode = Some(effecg::data::LabelMode::Multi);
    let loaded = model_data(&model, &cfg.data)?;
    let mut data: Prepared = prepare(&loaded.dataset, &cfg.preprocess, model.config().input_length)?;
    data.class_count = model.config().class_count;
    let k = data.class_count;
    let thresholds = match &a.thresholds {
        Some(t) => parse_thresholds(t, k)?,
        None => resolve_thresholds(&cfg.train, k).map_err(|e| usage(e.to_string()))?,
    };
    let scores = predict_scores(&model, &data, EVAL_CHUNK)?;
    let predicted = predict(&scores, model.config().head, &thresholds)?;
    let mut out = String::from("record");
    for c in 0..k {
        out.push_str(&format!(",score_{c}"));
    }
    out.push_str(",predicted\n");
    for (i, name) in loaded.names.iter().enumerate() {
        out.push_str(name);
        for v in scores.row(i) {
            out.push_str(&format!(",{v}"));
        }
        let labels: Vec<String> = predicted[i].iter().map(|c| c.to_string()).collect();
        out.push_str(&format!(",{}\n", labels.join(" ")));
    }
    ensure_dir(&a.outdir)?;
    write(&a.outdir.join("predictions.csv"), out)?;
    println!("scored {} records", loaded.names.len());
    Ok(())
}

pub fn gradcheck(seed: u64, trials: usize, only: Vec<String>, faulty: Option<String>) -> CliResult<()> {
    let opts = SuiteOptions {
        seed,
        trials,
        faulty,
        only,
    };
    let report = run_suite(&opts).map_err(|e| usage(e.to_string()))?;
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::Gradcheck(failed.join(", ")))
    }
}

pub fn analyze(
    config: Option<&Path>,
    data: Option<PathBuf>,
    labels: &[usize],
    bin_width: u32,
    bins: usize,
    outdir: Option<&Path>,
) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if data.is_some() {
        cfg.data.path = data;
    }
    let loaded = inputs::load(&cfg.data)?;
    let labels: Vec<usize> = if labels.is_empty() {
        (0..loaded.dataset.class_count).collect()
    } else {
        labels.to_vec()
    };
    let table = analyze_distribution(&loaded.dataset, &labels, bin_width, bins)?;
    let csv = table.to_csv();
    print!("{csv}");
    if let Some(dir) = outdir {
        ensure_dir(dir)?;
        write(&dir.join("distribution.csv"), csv)?;
    }
    Ok(())
}
