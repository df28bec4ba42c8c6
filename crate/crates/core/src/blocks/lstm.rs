use super::layers::Dense;
use super::params::{Ctx, Init, ParamSpec};
use crate::error::{Error, Result};
use crate::signal::FiducialFeature;
use crate::tensor::{Tensor, Var};

/// LSTM cell with gate order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    fn sub(&self, s: &str) -> String {
        format!("{}.{s}", self.name)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let g = 4 * self.hidden;
        let bound = 1.0 / (self.hidden as f64).sqrt();
        vec![
            ParamSpec::weight(self.sub("w_input"), &[self.input, g], Init::Uniform { bound }),
            ParamSpec::weight(self.sub("w_hidden"), &[self.hidden, g], Init::Uniform { bound }),
            ParamSpec::weight(self.sub("bias"), &[g], Init::Zeros),
        ]
    }

    /// One step on `x: [B, in]`, `h, c: [B, H]`, returning `(h', c')`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wx = ctx.param(&self.sub("w_input"))?;
        let wh = ctx.param(&self.sub("w_hidden"))?;
        let b = ctx.param(&self.sub("bias"))?;
        let t = &mut *ctx.tape;
        let zx = t.matmul(x, wx)?;
        let zh = t.matmul(h, wh)?;
        let z = t.add(zx, zh)?;
        let z = t.add_bias(z, b)?;
        let hd = self.hidden;
        let gate = |t: &mut crate::tensor::Tape, k: usize| t.narrow(z, 1, k * hd, hd);
        let i = gate(t, 0)?;
        let i = t.sigmoid(i);
        let f = gate(t, 1)?;
        let f = t.sigmoid(f);
        let g = gate(t, 2)?;
        let g = t.tanh(g);
        let o = gate(t, 3)?;
        let o = t.sigmoid(o);
        let fc = t.mul(f, c)?;
        let ig = t.mul(i, g)?;
        let c_next = t.add(fc, ig)?;
        let tc = t.tanh(c_next);
        let h_next = t.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Sequence autoencoder over scalar fiducial sequences.
///
/// The encoder reads `index / scale` at every valid position; masked
/// positions leave the state untouched, so the latent (final hidden state)
/// depends only on valid entries. The decoder unrolls from the latent and a
/// linear readout reconstructs the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmAutoencoder {
    pub name: String,
    pub hidden: usize,
    encoder: LstmCell,
    decoder: LstmCell,
    readout: Dense,
}

struct Steps {
    inputs: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
}

impl LstmAutoencoder {
    pub fn new(name: &str, hidden: usize) -> Self {
        Self {
            name: name.to_string(),
            hidden,
            encoder: LstmCell::new(format!("{name}.encoder"), 1, hidden),
            decoder: LstmCell::new(format!("{name}.decoder"), hidden, hidden),
            readout: Dense::new(format!("{name}.readout"), hidden, 1),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        [self.encoder.specs(), self.decoder.specs(), self.readout.specs()].concat()
    }

    /// Time-major inputs and masks; masked inputs are written as zero so the
    /// stored pad value never reaches the arithmetic.
    fn steps(seqs: &[FiducialFeature], scale: f64) -> Result<Steps> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!("sequence scale must be positive, got {scale}")));
        }
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut inputs = vec![vec![0.0; seqs.len()]; t_max];
        let mut masks = vec![vec![false; seqs.len()]; t_max];
        for (b, s) in seqs.iter().enumerate() {
            if s.mask.len() != s.values.len() {
                return Err(Error::shape("lstm_autoencoder", "mask and values differ in length"));
            }
            for t in 0..s.len() {
                if s.mask[t] {
                    masks[t][b] = true;
                    inputs[t][b] = s.values[t] as f64 / scale;
                }
            }
        }
        Ok(Steps { inputs, masks })
    }

    /// Latent `[B, H]`; all-masked sequences give zeros.
    pub fn encode(&self, ctx: &mut Ctx, seqs: &[FiducialFeature], scale: f64) -> Result<Var> {
        let steps = Self::steps(seqs, scale)?;
        let b = seqs.len();
        let mut h = ctx.tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut c = ctx.tape.constant(Tensor::zeros(&[b, self.hidden]));
        for (x, mask) in steps.inputs.iter().zip(&steps.masks) {
            if !mask.iter().any(|m| *m) {
                continue;
            }
            let xv = ctx.tape.constant(Tensor::new(vec![b, 1], x.clone())?);
            let (hn, cn) = self.encoder.forward(ctx, xv, h, c)?;
            h = ctx.tape.select_rows(mask, hn, h)?;
            c = ctx.tape.select_rows(mask, cn, c)?;
        }
        Ok(h)
    }

    /// Mean squared reconstruction error over valid positions, or `None`
    /// when the batch has no valid position.
    pub fn reconstruction_loss(
        &self,
        ctx: &mut Ctx,
        latent: Var,
        seqs: &[FiducialFeature],
        scale: f64,
    ) -> Result<Option<Var>> {
        let steps = Self::steps(seqs, scale)?;
        let b = seqs.len();
        let valid: usize = steps.masks.iter().flatten().filter(|m| **m).count();
        if valid == 0 {
            return Ok(None);
        }
        let mut h = ctx.tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut c = ctx.tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut total: Option<Var> = None;
        for (x, mask) in steps.inputs.iter().zip(&steps.masks) {
            let (hn, cn) = self.decoder.forward(ctx, latent, h, c)?;
            h = hn;
            c = cn;
            let pred = self.readout.forward(ctx, h)?;
            let target = ctx.tape.constant(Tensor::new(vec![b, 1], x.clone())?);
            let diff = ctx.tape.sub(pred, target)?;
            let weights: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
            let diff = ctx.tape.mul_const(diff, &Tensor::new(vec![b, 1], weights)?)?;
            let sq = ctx.tape.mul(diff, diff)?;
            let s = ctx.tape.sum(sq);
            total = Some(match total {
                Some(acc) => ctx.tape.add(acc, s)?,
                None => s,
            });
        }
        Ok(total.map(|t| ctx.tape.scale(t, 1.0 / valid as f64)))
    }
}
