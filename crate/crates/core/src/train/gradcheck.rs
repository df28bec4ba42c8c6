//! Finite-difference checks of every trainable block and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::loss::{bce_loss, cross_entropy_loss, mse_l2_loss};
use crate::blocks::{
    BatchNorm, Conv1d, CrossAttentionConfig, CrossAttentionFusion, Ctx, Dense, DepthwiseConv1d, Embedding, LstmCell,
    MbConv, MbConvConfig, Mode, ParamStore, SeBlock,
};
use crate::error::Result;
use crate::tensor::{grad_check_many, Tape, Tensor, Var};

/// Step used for central differences.
pub const GRAD_EPS: f64 = 1e-5;
/// Bound for layers and blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Bound for the losses.
pub const LOSS_TOLERANCE: f64 = 1e-6;

/// Rows of the suite in run order.
pub const CASES: [&str; 13] = [
    "dense",
    "conv1d",
    "depthwise_conv1d",
    "batch_norm_train",
    "batch_norm_eval",
    "squeeze_excitation",
    "mbconv",
    "lstm_cell_3_steps",
    "embedding",
    "cross_attention",
    "mse_l2_loss",
    "bce_loss",
    "cross_entropy_loss",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<20} {:>6} {:>12} {:>8}  result\n", "block", "trials", "max_rel_err", "bound");
        for c in &self.cases {
            out.push_str(&format!(
                "{:<20} {:>6} {:>12.3e} {:>8.0e}  {}\n",
                c.name,
                c.trials,
                c.worst,
                c.tolerance,
                if c.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub trials: usize,
    /// Case whose output is routed through an op with a deliberately wrong
    /// adjoint; that row should fail.
    pub faulty: Option<String>,
    /// Restrict to these cases; all when empty.
    pub only: Vec<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            faulty: None,
            only: Vec::new(),
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// Identity forward with a doubled adjoint.
fn corrupt(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.custom_unary(x, |t| t.clone(), |_, g| g.data().iter().map(|v| 2.0 * v).collect())
}

/// A trial: data inputs, the store, and a forward that reads parameters
/// through the context.
struct Trial<F> {
    inputs: Vec<Tensor>,
    store: ParamStore,
    mode: Mode,
    forward: F,
}

type Forward = Box<dyn Fn(&mut Ctx, &[Var]) -> Result<Vec<Var>>>;

/// Checks a trial with every data input and trainable parameter perturbed;
/// outputs are reduced by fixed random weights.
fn check_trial(trial: Trial<Forward>, rng: &mut ChaCha8Rng, faulty: bool) -> Result<f64> {
    let names = trial.store.trainable_names();
    let n_data = trial.inputs.len();
    let mut inputs = trial.inputs.clone();
    for n in &names {
        inputs.push(trial.store.get(n)?.clone());
    }
    let run = |tape: &mut Tape, vars: &[Var]| -> Result<Vec<Var>> {
        let mut ctx = Ctx::new(tape, &trial.store, trial.mode);
        for (n, v) in names.iter().zip(&vars[n_data..]) {
            ctx.bind(n.clone(), *v);
        }
        (trial.forward)(&mut ctx, &vars[..n_data])
    };
    let shapes: Vec<Vec<usize>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        run(&mut tape, &vars)?.iter().map(|v| tape.shape(*v).to_vec()).collect()
    };
    let readout: Vec<Tensor> = shapes.iter().map(|s| randn(rng, s, 1.0)).collect();
    grad_check_many(
        |tape, vars| {
            let outs = run(tape, vars)?;
            let mut total: Option<Var> = None;
            for (i, (o, w)) in outs.iter().zip(&readout).enumerate() {
                let o = if faulty && i == 0 { corrupt(tape, *o)? } else { *o };
                let p = tape.mul_const(o, w)?;
                let s = tape.sum(p);
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.expect("at least one output"))
        },
        &inputs,
        GRAD_EPS,
    )
}

fn store_for(specs: &[crate::blocks::ParamSpec], rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut store = ParamStore::from_specs(specs, rng.random())?;
    // Perturb ones/zeros inits so gamma, beta and biases are generic.
    for s in specs {
        if s.trainable {
            let t = store.get(&s.name)?;
            let noisy: Vec<f64> = t
                .data()
                .iter()
                .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            store.set(&s.name, Tensor::new(s.shape.clone(), noisy)?)?;
        } else if s.name.ends_with("running_var") {
            let v: Vec<f64> = (0..s.numel()).map(|_| rng.random_range(0.5..2.0)).collect();
            store.set(&s.name, Tensor::new(s.shape.clone(), v)?)?;
        } else {
            store.set(&s.name, randn(rng, &s.shape, 0.5))?;
        }
    }
    Ok(store)
}

fn build(case: &str, rng: &mut ChaCha8Rng) -> Result<(Trial<Forward>, f64)> {
    let b = rng.random_range(2..4);
    let trial: Trial<Forward> = match case {
        "dense" => {
            let (i, o) = (rng.random_range(1..5), rng.random_range(1..5));
            let layer = Dense::new("d", i, o);
            Trial {
                inputs: vec![randn(rng, &[b, i], 1.0)],
                store: store_for(&layer.specs(), rng)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| Ok(vec![layer.forward(ctx, x[0])?])),
            }
        }
        "conv1d" => {
            let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
            let k = rng.random_range(1..6);
            let stride = rng.random_range(1..3);
            let n = rng.random_range(k.max(stride)..9);
            let layer = Conv1d::new("c", ci, co, k, stride);
            Trial {
                inputs: vec![randn(rng, &[b, ci, n], 1.0)],
                store: store_for(&layer.specs(), rng)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| {
                    let y = layer.forward(ctx, x[0])?;
                    Ok(vec![ctx.tape.swish(y)])
                }),
            }
        }
        "depthwise_conv1d" => {
            let c = rng.random_range(1..4);
            let k = rng.random_range(1..6);
            let stride = rng.random_range(1..3);
            let n = rng.random_range(k.max(stride)..9);
            let layer = DepthwiseConv1d {
                name: "dw".into(),
                channels: c,
                kernel: k,
                stride,
            };
            Trial {
                inputs: vec![randn(rng, &[b, c, n], 1.0)],
                store: store_for(&layer.specs(), rng)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| Ok(vec![layer.forward(ctx, x[0])?])),
            }
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let c = rng.random_range(1..4);
            let n = rng.random_range(2..6);
            let layer = BatchNorm::new("bn", c, 1e-3);
            Trial {
                inputs: vec![randn(rng, &[b, c, n], 1.0)],
                store: store_for(&layer.specs(), rng)?,
                mode: if case == "batch_norm_train" { Mode::Train } else { Mode::Eval },
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| Ok(vec![layer.forward(ctx, x[0])?])),
            }
        }
        "squeeze_excitation" => {
            let c = rng.random_range(2..6);
            let r = rng.random_range(1..3);
            let n = rng.random_range(2..6);
            let layer = SeBlock::new("se", c, r)?;
            Trial {
                inputs: vec![randn(rng, &[b, c, n], 1.0)],
                store: store_for(&layer.specs(), rng)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| Ok(vec![layer.forward(ctx, x[0])?])),
            }
        }
        "mbconv" => {
            // A 1x1 weight feeding train-mode BN is a pure channel scale that BN
            // cancels; its gradient is ~0 and central differences are all noise.
            // At least two input channels and kernel 3 or 5 avoid that case.
            // SE ratio 1 saturates the excitation gate on random weights.
            let cin = rng.random_range(2..4);
            let cout = if rng.random_bool(0.5) { cin } else { rng.random_range(1..4) };
            let cfg = MbConvConfig {
                in_channels: cin,
                out_channels: cout,
                expansion: rng.random_range(1..4),
                kernel: [3, 5][rng.random_range(0..2)],
                stride: rng.random_range(1..3),
                se_ratio: [0, 2, 4][rng.random_range(0..3)],
                bn_eps: 1e-3,
            };
            let n = rng.random_range(4..8);
            let mode = if rng.random_bool(0.5) { Mode::Train } else { Mode::Eval };
            let block = MbConv::new("m", cfg)?;
            Trial {
                inputs: vec![randn(rng, &[b, cin, n], 0.5)],
                store: store_for(&block.specs(), rng)?,
                mode,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| Ok(vec![block.forward(ctx, x[0])?])),
            }
        }
        "lstm_cell_3_steps" => {
            let i = rng.random_range(1..3);
            let h = rng.random_range(1..4);
            let cell = LstmCell::new("l", i, h);
            let mut inputs: Vec<Tensor> = (0..3).map(|_| randn(rng, &[b, i], 1.0)).collect();
            inputs.push(randn(rng, &[b, h], 0.5));
            inputs.push(randn(rng, &[b, h], 0.5));
            Trial {
                inputs,
                store: store_for(&cell.specs(), rng)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| {
                    let (mut hs, mut cs) = (x[3], x[4]);
                    for step in &x[..3] {
                        (hs, cs) = cell.forward(ctx, *step, hs, cs)?;
                    }
                    Ok(vec![hs, cs])
                }),
            }
        }
        "embedding" => {
            let v = rng.random_range(2..6);
            let d = rng.random_range(1..4);
            let e = Embedding::new("e", v, d);
            let idx: Vec<usize> = (0..b + 2).map(|_| rng.random_range(0..v)).collect();
            Trial {
                inputs: vec![],
                store: store_for(&e.specs(), rng)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, _: &[Var]| Ok(vec![e.forward(ctx, &idx)?])),
            }
        }
        "cross_attention" => {
            let (use_age, use_gender) = match rng.random_range(0..3) {
                0 => (true, true),
                1 => (true, false),
                _ => (false, true),
            };
            let cfg = CrossAttentionConfig {
                embed_dim: rng.random_range(1..4),
                feature_dim: rng.random_range(1..5),
                tokens: rng.random_range(1..4),
                width: rng.random_range(1..3),
                use_age,
                use_gender,
                scaled: rng.random_bool(0.5),
            };
            let (d, f) = (cfg.embed_dim, cfg.feature_dim);
            let att = CrossAttentionFusion::new("a", cfg)?;
            Trial {
                // moderate embeddings keep the attention softmax away from saturation
                inputs: vec![randn(rng, &[b, f], 1.0), randn(rng, &[b, d], 0.5), randn(rng, &[b, d], 0.5)],
                store: store_for(&att.specs(), rng)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| {
                    let age = use_age.then_some(x[1]);
                    let gender = use_gender.then_some(x[2]);
                    Ok(vec![att.forward(ctx, x[0], age, gender)?])
                }),
            }
        }
        "mse_l2_loss" => {
            let k = rng.random_range(1..4);
            let (wi, wo) = (rng.random_range(1..4), rng.random_range(1..4));
            let y = randn(rng, &[b, k], 1.0);
            let lambda = rng.random_range(0.0..0.5);
            Trial {
                inputs: vec![randn(rng, &[b, k], 1.0), randn(rng, &[wi, wo], 1.0)],
                store: ParamStore::from_specs(&[], 0)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| {
                    Ok(vec![mse_l2_loss(ctx.tape, &y, x[0], &[x[1]], lambda)?])
                }),
            }
        }
        "bce_loss" | "cross_entropy_loss" => {
            let k = rng.random_range(2..5);
            let weighted = rng.random_bool(0.5);
            let weights: Option<Vec<f64>> = weighted.then(|| (0..k).map(|_| rng.random_range(0.5..2.0)).collect());
            let bce = case == "bce_loss";
            let mut y = vec![0.0; b * k];
            for row in 0..b {
                if bce {
                    for c in 0..k {
                        y[row * k + c] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                    }
                } else {
                    y[row * k + rng.random_range(0..k)] = 1.0;
                }
            }
            let y = Tensor::new(vec![b, k], y)?;
            Trial {
                inputs: vec![randn(rng, &[b, k], 1.0)],
                store: ParamStore::from_specs(&[], 0)?,
                mode: Mode::Eval,
                forward: Box::new(move |ctx: &mut Ctx, x: &[Var]| {
                    let w = weights.as_deref();
                    let l = if bce {
                        let p = ctx.tape.sigmoid(x[0]);
                        bce_loss(ctx.tape, &y, p, w)?
                    } else {
                        let p = ctx.tape.softmax(x[0], 1)?;
                        cross_entropy_loss(ctx.tape, &y, p, w)?
                    };
                    Ok(vec![l])
                }),
            }
        }
        other => {
            return Err(crate::Error::InvalidArgument(format!(
                "unknown gradient-check case `{other}`; known: {}",
                CASES.join(", ")
            )))
        }
    };
    let tol = if case.ends_with("_loss") { LOSS_TOLERANCE } else { BLOCK_TOLERANCE };
    Ok((trial, tol))
}

/// One case over `trials` seeded trials.
pub fn run_case(case: &str, seed: u64, trials: usize, faulty: bool) -> Result<CaseResult> {
    let mut worst = 0.0f64;
    let mut tolerance = BLOCK_TOLERANCE;
    for t in 0..trials {
        let salt = case.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (trial, tol) = build(case, &mut rng)?;
        tolerance = tol;
        worst = worst.max(check_trial(trial, &mut rng, faulty)?);
    }
    Ok(CaseResult {
        name: case.to_string(),
        trials,
        worst,
        tolerance,
        passed: worst < tolerance,
    })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    for name in opts.only.iter().chain(&opts.faulty) {
        if !CASES.contains(&name.as_str()) {
            return Err(crate::Error::InvalidArgument(format!(
                "unknown gradient-check case `{name}`; known: {}",
                CASES.join(", ")
            )));
        }
    }
    let cases = CASES
        .iter()
        .filter(|c| opts.only.is_empty() || opts.only.iter().any(|o| o == *c))
        .map(|c| run_case(c, opts.seed, opts.trials, opts.faulty.as_deref() == Some(*c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { seed: opts.seed, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_trials() {
        let report = run_suite(&SuiteOptions {
            trials: 5,
            ..SuiteOptions::default()
        })
        .unwrap();
        assert!(report.passed(), "{}", report.table());
        assert_eq!(report.cases.len(), CASES.len());
    }

    #[test]
    fn injected_fault_fails_its_row_only() {
        let report = run_suite(&SuiteOptions {
            trials: 3,
            faulty: Some("conv1d".into()),
            only: vec!["conv1d".into(), "dense".into()],
            ..SuiteOptions::default()
        })
        .unwrap();
        let conv = report.cases.iter().find(|c| c.name == "conv1d").unwrap();
        let dense = report.cases.iter().find(|c| c.name == "dense").unwrap();
        assert!(!conv.passed && conv.worst > 0.1);
        assert!(dense.passed);
    }

    #[test]
    fn unknown_case_rejected() {
        let opts = SuiteOptions {
            only: vec!["nope".into()],
            ..SuiteOptions::default()
        };
        assert!(run_suite(&opts).is_err());
    }
}
