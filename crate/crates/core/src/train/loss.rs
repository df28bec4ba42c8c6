use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared error on the scores.
    MseL2,
    /// Binary cross-entropy per class (multi-label).
    Bce,
    /// Categorical cross-entropy (single-label).
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// L2 coefficient on the dense head weights.
    pub lambda: f64,
    /// Per-class multipliers on the data term.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            lambda: 1e-4,
            class_weights: None,
        }
    }
}

fn check_target(op: &'static str, tape: &Tape, y: &Tensor, pred: Var) -> Result<usize> {
    let shape = tape.shape(pred);
    if y.shape() != shape {
        return Err(Error::shape(
            op,
            format!("targets {:?} but predictions {:?}", y.shape(), shape),
        ));
    }
    match shape.first() {
        Some(&m) if m > 0 => Ok(m),
        _ => Err(Error::shape(op, "empty batch")),
    }
}

/// Per-element weights from per-class weights; `None` when unweighted.
fn weight_tensor(shape: &[usize], class_weights: Option<&[f64]>) -> Result<Option<Tensor>> {
    let Some(w) = class_weights else { return Ok(None) };
    let k = *shape.last().unwrap_or(&1);
    if w.len() != k {
        return Err(Error::InvalidArgument(format!("{} class weights for {k} classes", w.len())));
    }
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| w[i % k]).collect()).map(Some)
}

/// `(lambda / m) * sum ||W||_F^2` over `weights`.
pub fn l2_penalty(tape: &mut Tape, weights: &[Var], lambda: f64, m: usize) -> Result<Option<Var>> {
    if weights.is_empty() || lambda == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for w in weights {
        let sq = tape.mul(*w, *w)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| tape.scale(t, lambda / m as f64)))
}

/// `(1/m) sum (y - y_hat)^2 + (lambda/m) sum ||W||^2`, `m` the row count.
pub fn mse_l2_loss(tape: &mut Tape, y: &Tensor, y_hat: Var, weights: &[Var], lambda: f64) -> Result<Var> {
    let m = check_target("mse_l2_loss", tape, y, y_hat)?;
    let target = tape.constant(y.clone());
    let diff = tape.sub(y_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    let data = tape.scale(s, 1.0 / m as f64);
    match l2_penalty(tape, weights, lambda, m)? {
        Some(p) => tape.add(data, p),
        None => Ok(data),
    }
}

/// `-(1/N) sum_i sum_c [y ln p + (1 - y) ln(1 - p)]` with clamped `p`.
pub fn bce_loss(tape: &mut Tape, y: &Tensor, p: Var, class_weights: Option<&[f64]>) -> Result<Var> {
    let n = check_target("bce_loss", tape, y, p)?;
    let shape = y.shape().to_vec();
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.ln(pc);
    let neg = tape.scale(pc, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let lq = tape.ln(one_minus);
    let y_comp = Tensor::new(shape.clone(), y.data().iter().map(|v| 1.0 - v).collect())?;
    let a = tape.mul_const(lp, y)?;
    let b = tape.mul_const(lq, &y_comp)?;
    let mut terms = tape.add(a, b)?;
    if let Some(w) = weight_tensor(&shape, class_weights)? {
        terms = tape.mul_const(terms, &w)?;
    }
    let s = tape.sum(terms);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// `-(1/N) sum_i sum_c y ln p` with clamped `p` (one-hot `y`).
pub fn cross_entropy_loss(tape: &mut Tape, y: &Tensor, p: Var, class_weights: Option<&[f64]>) -> Result<Var> {
    let n = check_target("cross_entropy_loss", tape, y, p)?;
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.ln(pc);
    let mut terms = tape.mul_const(lp, y)?;
    if let Some(w) = weight_tensor(y.shape(), class_weights)? {
        terms = tape.mul_const(terms, &w)?;
    }
    let s = tape.sum(terms);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Multi-hot `[B, K]` targets from label sets.
pub fn multi_hot(labels: &[Vec<usize>], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, set) in labels.iter().enumerate() {
        for &c in set {
            if c >= k {
                return Err(Error::InvalidArgument(format!("label {c} out of range for {k} classes")));
            }
            data[i * k + c] = 1.0;
        }
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Objective selected by `cfg` on scores `p`, plus the L2 term over
/// `decayed` weights.
pub fn objective(tape: &mut Tape, cfg: &LossConfig, y: &Tensor, p: Var, decayed: &[Var]) -> Result<Var> {
    let weights = cfg.class_weights.as_deref();
    if cfg.lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", cfg.lambda)));
    }
    match cfg.kind {
        LossKind::MseL2 => {
            if weights.is_some() {
                return Err(Error::InvalidArgument("class weights are not supported with mse_l2".into()));
            }
            mse_l2_loss(tape, y, p, decayed, cfg.lambda)
        }
        LossKind::Bce | LossKind::CrossEntropy => {
            let data = if cfg.kind == LossKind::Bce {
                bce_loss(tape, y, p, weights)?
            } else {
                cross_entropy_loss(tape, y, p, weights)?
            };
            let m = tape.shape(p)[0];
            match l2_penalty(tape, decayed, cfg.lambda, m)? {
                Some(pen) => tape.add(data, pen),
                None => Ok(data),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn mse_examples() {
        let mut t = Tape::new();
        let y = Tensor::from_slice(&[1.0, 0.0]).reshape(&[2, 1]).unwrap();
        let yh = t.constant(y.clone());
        let l = mse_l2_loss(&mut t, &y, yh, &[], 0.0).unwrap();
        assert_eq!(scalar(&t, l), 0.0);

        let yh = t.constant(Tensor::from_slice(&[0.5, 0.5]).reshape(&[2, 1]).unwrap());
        let l = mse_l2_loss(&mut t, &y, yh, &[], 0.0).unwrap();
        assert!((scalar(&t, l) - 0.25).abs() < 1e-15);

        let w = t.constant(Tensor::from_rows(&[[1.0, 1.0]]).unwrap());
        let l = mse_l2_loss(&mut t, &y, yh, &[w], 2.0).unwrap();
        assert!((scalar(&t, l) - 2.25).abs() < 1e-15);

        let bad = t.constant(Tensor::zeros(&[3, 1]));
        assert!(mse_l2_loss(&mut t, &y, bad, &[], 0.0).is_err());
    }

    #[test]
    fn bce_examples() {
        let mut t = Tape::new();
        let y = Tensor::from_rows(&[[1.0]]).unwrap();
        let p = t.constant(Tensor::from_rows(&[[0.5]]).unwrap());
        let l = bce_loss(&mut t, &y, p, None).unwrap();
        assert!((scalar(&t, l) - std::f64::consts::LN_2).abs() < 1e-12);

        let p = t.constant(Tensor::from_rows(&[[1.0]]).unwrap());
        let l = bce_loss(&mut t, &y, p, None).unwrap();
        assert!(scalar(&t, l) < 1e-6);

        let y = Tensor::from_rows(&[[1.0], [0.0]]).unwrap();
        let p = t.constant(Tensor::from_rows(&[[0.9], [0.2]]).unwrap());
        let l = bce_loss(&mut t, &y, p, None).unwrap();
        let expect = -0.5 * (0.9f64.ln() + 0.8f64.ln());
        assert!((scalar(&t, l) - expect).abs() < 1e-12);
        assert!((expect - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_and_weights() {
        let mut t = Tape::new();
        let y = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let p = t.constant(Tensor::from_rows(&[[0.25, 0.75]]).unwrap());
        let l = cross_entropy_loss(&mut t, &y, p, None).unwrap();
        assert!((scalar(&t, l) + 0.75f64.ln()).abs() < 1e-12);
        let l = cross_entropy_loss(&mut t, &y, p, Some(&[1.0, 2.0])).unwrap();
        assert!((scalar(&t, l) + 2.0 * 0.75f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_loss(&mut t, &y, p, Some(&[1.0])).is_err());
    }

    #[test]
    fn multi_hot_targets() {
        let y = multi_hot(&[vec![0, 2], vec![]], 3).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(multi_hot(&[vec![3]], 3).is_err());
    }
}
