use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::{multi_hot, objective, LossConfig};
use super::optim::{noam_lr, oversample_indices, Adam, EarlyStopConfig, EarlyStopper, Monitor, ScheduleConfig, StopDecision};
use crate::blocks::{Ctx, Mode, ParamStore};
use crate::data::{make_batches, LabelMode, Prepared};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, one_vs_rest, Counts};
use crate::model::{Model, ModelInput};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    /// `None` trains for the full epoch count.
    pub early_stopping: Option<EarlyStopConfig>,
    /// Duplicate minority-class samples (single-label data only).
    pub oversample: bool,
    /// Put the best-epoch weights back when training ends.
    pub restore_best: bool,
    /// Per-class decision thresholds for a sigmoid head; 0.5 when absent.
    pub thresholds: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            early_stopping: Some(EarlyStopConfig::default()),
            oversample: false,
            restore_best: true,
            thresholds: None,
            seed: 0,
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub step: usize,
    /// Rate used for the last step of the epoch.
    pub lrate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_micro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Epoch whose weights the model holds on return when `restore_best` is set.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: usize,
}

pub const HISTORY_HEADER: &str = "epoch,step,lrate,train_loss,val_loss,val_micro_f1";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.step,
            r.lrate,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_micro_f1)
        ));
    }
    out
}

fn mix(seed: u64, n: u64) -> u64 {
    seed ^ n.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Thresholds from the config or 0.5 per class.
pub fn resolve_thresholds(cfg: &TrainConfig, class_count: usize) -> Result<Vec<f64>> {
    match &cfg.thresholds {
        Some(t) if t.len() != class_count => Err(Error::InvalidArgument(format!(
            "{} thresholds for {class_count} classes",
            t.len()
        ))),
        Some(t) => Ok(t.clone()),
        None => Ok(vec![0.5; class_count]),
    }
}

fn check_compat(model: &Model, data: &Prepared) -> Result<()> {
    let c = model.config();
    if data.leads != c.leads || data.input_length != c.input_length || data.class_count != c.class_count {
        return Err(Error::InvalidArgument(format!(
            "data has {} leads, {} samples, {} classes; model expects {}, {}, {}",
            data.leads, data.input_length, data.class_count, c.leads, c.input_length, c.class_count
        )));
    }
    Ok(())
}

/// Training objective for one forward pass, built on `ctx`.
pub fn batch_objective(model: &Model, ctx: &mut Ctx, input: &ModelInput, y: &Tensor, loss: &LossConfig) -> Result<(Var, Var)> {
    let out = model.run(ctx, input)?;
    let decayed: Vec<Var> = model
        .decayed_names()
        .iter()
        .map(|n| ctx.param(n))
        .collect::<Result<_>>()?;
    let mut total = objective(ctx.tape, loss, y, out.scores, &decayed)?;
    let w = model.config().reconstruction_weight;
    if let Some(r) = out.reconstruction {
        let r = ctx.tape.scale(r, w);
        total = ctx.tape.add(total, r)?;
    }
    Ok((total, out.scores))
}

/// Eval-mode scores for every sample, computed in chunks.
pub fn predict_scores(model: &Model, data: &Prepared, chunk: usize) -> Result<Tensor> {
    let k = model.config().class_count;
    let mut all = Vec::with_capacity(data.len() * k);
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let s = model.forward(&data.batch(c)?)?;
        all.extend_from_slice(s.data());
    }
    Tensor::new(vec![data.len(), k], all)
}

/// Eval-mode objective (without the reconstruction term) over all of `data`,
/// plus the scores.
pub fn eval_loss(model: &Model, data: &Prepared, loss: &LossConfig, chunk: usize) -> Result<(f64, Tensor)> {
    let scores = predict_scores(model, data, chunk)?;
    let y = multi_hot(&data.labels(), model.config().class_count)?;
    let mut tape = Tape::new();
    let p = tape.constant(scores.clone());
    let decayed: Vec<Var> = model
        .decayed_names()
        .iter()
        .map(|n| Ok(tape.constant(model.params().get(n)?.clone())))
        .collect::<Result<_>>()?;
    let l = objective(&mut tape, loss, &y, p, &decayed)?;
    Ok((tape.value(l).item().unwrap_or(f64::NAN), scores))
}

/// Mini-batch training with the warmup schedule, Adam, and optional early
/// stopping. `on_epoch` sees each history row as it is produced.
pub fn train_loop(
    model: &mut Model,
    train: &Prepared,
    val: Option<&Prepared>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    check_compat(model, train)?;
    if let Some(v) = val {
        check_compat(model, v)?;
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let k = model.config().class_count;
    let thresholds = resolve_thresholds(cfg, k)?;
    let d_model = cfg.schedule.d_model.unwrap_or(model.config().fc_hidden);
    let momentum = model.config().bn_momentum;
    let train = if cfg.oversample {
        if train.label_mode != LabelMode::Single {
            return Err(Error::InvalidArgument("oversampling needs single-label data".into()));
        }
        let labels: Vec<usize> = train.samples.iter().map(|s| s.labels[0]).collect();
        train.subset(&oversample_indices(&labels, k, cfg.seed)?)
    } else {
        train.clone()
    };
    let targets = multi_hot(&train.labels(), k)?;

    let trainable = model.params().trainable_names();
    let mut adam = Adam::default();
    let mut stopper = cfg.early_stopping.as_ref().map(|es| {
        let lower = val.is_none() || es.monitor == Monitor::ValLoss;
        EarlyStopper::new(es.patience, es.min_delta, lower)
    });
    let mut best: Option<(usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train.len(), cfg.batch_size, mix(cfg.seed, epoch as u64))?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut lr = 0.0;
        for batch in &batches {
            if batch.len() < 2 {
                log::warn!("epoch {epoch}: skipping a batch of one sample");
                continue;
            }
            step += 1;
            lr = noam_lr(step, d_model, cfg.schedule.warmup_steps);
            let input = train.batch(batch)?;
            let y_rows: Vec<f64> = batch.iter().flat_map(|i| targets.row(*i).to_vec()).collect();
            let y = Tensor::new(vec![batch.len(), k], y_rows)?;

            let mut tape = Tape::new();
            let (loss_value, grads, updates) = {
                let store = model.params();
                let mut ctx = Ctx::new(&mut tape, store, Mode::Train)
                    .with_seed(mix(cfg.seed.rotate_left(17), step as u64))
                    .tracking(true);
                let (loss, _) = batch_objective(model, &mut ctx, &input, &y, &cfg.loss)?;
                let updates = ctx.take_bn_updates();
                let bound: Vec<(String, Var)> = trainable
                    .iter()
                    .filter_map(|n| ctx.bound().get(n).map(|v| (n.clone(), *v)))
                    .collect();
                let value = ctx.tape.value(loss).item().unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(Error::Divergence { step });
                }
                let g = ctx.tape.backward(loss)?;
                let grads: BTreeMap<String, Vec<f64>> = bound
                    .into_iter()
                    .filter_map(|(n, v)| g.get(v).map(|d| (n, d.to_vec())))
                    .collect();
                (value, grads, updates)
            };
            if grads.values().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence { step });
            }
            let params = model.params_mut();
            adam.step(params, &grads, lr)?;
            for u in &updates {
                params.apply_bn_update(u, momentum)?;
            }
            loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size {} leaves no batch with two or more samples",
                cfg.batch_size
            )));
        }
        let (val_loss, val_f1) = match val {
            Some(v) if !v.is_empty() => {
                let (l, scores) = eval_loss(model, v, &cfg.loss, cfg.batch_size)?;
                let (report, _) = evaluate(&scores, &v.labels(), model.config().head, &thresholds, None, 0)?;
                (Some(l), Some(report.micro_f1))
            }
            _ => (None, None),
        };
        let row = HistoryRow {
            epoch,
            step,
            lrate: lr,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_micro_f1: val_f1,
        };
        on_epoch(&row);

        let watched = match (&cfg.early_stopping, val_loss) {
            (Some(es), Some(vl)) if es.monitor == Monitor::ValLoss => vl,
            (Some(_), Some(_)) => val_f1.unwrap_or(f64::NAN),
            _ => row.train_loss,
        };
        history.push(row);
        match stopper.as_mut() {
            Some(s) => {
                let decision = s.observe(watched);
                if s.improved() {
                    best = Some((epoch, model.params().clone()));
                }
                if decision == StopDecision::Stop {
                    stopped_early = true;
                    break;
                }
            }
            None => best = None,
        }
    }

    let last = history.last().map_or(0, |r| r.epoch);
    let best_epoch = match best {
        Some((e, store)) if cfg.restore_best => {
            *model.params_mut() = store;
            e
        }
        _ => last,
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        stopped_early,
        steps: step,
    })
}

/// Per-class threshold from `grid` maximising that class's F1; the first
/// best value wins ties.
pub fn sweep_thresholds(scores: &Tensor, labels: &[Vec<usize>], grid: &[f64]) -> Result<Vec<f64>> {
    let [b, k] = scores.shape()[..] else {
        return Err(Error::shape("sweep_thresholds", format!("scores must be [B, K], got {:?}", scores.shape())));
    };
    if labels.len() != b || grid.is_empty() {
        return Err(Error::InvalidArgument("need one label set per row and a non-empty grid".into()));
    }
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let truth: Vec<Vec<usize>> = labels.iter().map(|l| if l.contains(&c) { vec![0] } else { vec![] }).collect();
        let mut best = (f64::NEG_INFINITY, grid[0]);
        for &t in grid {
            let pred: Vec<Vec<usize>> = (0..b)
                .map(|i| if scores.data()[i * k + c] >= t { vec![0] } else { vec![] })
                .collect();
            let m = one_vs_rest(&truth, &pred, 1)?[0];
            let f1 = Counts {
                tp: m[1][1],
                fp: m[0][1],
                fn_: m[1][0],
            }
            .f1();
            if f1 > best.0 {
                best = (f1, t);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}
