use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv1d, Dense, DepthwiseConv1d};
use super::params::{Ctx, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Squeeze-and-excitation: global average pool, `C -> C/r` dense with ReLU,
/// `C/r -> C` dense with sigmoid, then per-channel rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub channels: usize,
    pub reduced: usize,
    reduce: Dense,
    expand: Dense,
}

impl SeBlock {
    pub fn new(name: &str, channels: usize, reduction_ratio: usize) -> Result<Self> {
        if reduction_ratio == 0 || channels == 0 {
            return Err(Error::InvalidArgument(
                "squeeze-excitation needs positive channels and reduction ratio".into(),
            ));
        }
        let reduced = (channels / reduction_ratio).max(1);
        Ok(Self {
            channels,
            reduced,
            reduce: Dense::new(format!("{name}.reduce"), channels, reduced),
            expand: Dense::new(format!("{name}.expand"), reduced, channels),
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        [self.reduce.specs(), self.expand.specs()].concat()
    }

    /// Channel weights `s` in `(0, 1)`, shape `[B, C]`.
    pub fn excitation(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let squeezed = ctx.tape.global_avg_pool(x)?;
        let h = self.reduce.forward(ctx, squeezed)?;
        let h = ctx.tape.relu(h);
        let s = self.expand.forward(ctx, h)?;
        Ok(ctx.tape.sigmoid(s))
    }

    /// `x: [B, C, N]` scaled per channel.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = self.excitation(ctx, x)?;
        ctx.tape.scale_channels(x, s)
    }
}

/// One row of the stage table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub expansion: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub repeats: usize,
    /// Squeeze-excitation reduction ratio; 0 disables the SE block.
    pub se_ratio: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    pub se_ratio: usize,
    pub bn_eps: f64,
}

/// Mobile inverted bottleneck:
/// expand 1x1 conv, BN, swish, depthwise conv, BN, swish, SE, project 1x1
/// conv, BN, plus the identity shortcut when shapes allow it.
#[derive(Debug, Clone, PartialEq)]
pub struct MbConv {
    pub config: MbConvConfig,
    expand: Option<(Conv1d, BatchNorm)>,
    depthwise: DepthwiseConv1d,
    dw_bn: BatchNorm,
    se: Option<SeBlock>,
    project: Conv1d,
    project_bn: BatchNorm,
}

impl MbConv {
    pub fn new(name: &str, config: MbConvConfig) -> Result<Self> {
        let c = &config;
        if c.in_channels == 0 || c.out_channels == 0 || c.expansion == 0 || c.kernel == 0 || c.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "MBConv `{name}` has a zero-sized dimension: {c:?}"
            )));
        }
        let mid = c.in_channels * c.expansion;
        let expand = (c.expansion != 1).then(|| {
            (
                Conv1d::new(format!("{name}.expand"), c.in_channels, mid, 1, 1),
                BatchNorm::new(format!("{name}.expand_bn"), mid, c.bn_eps),
            )
        });
        let se = if c.se_ratio > 0 {
            Some(SeBlock::new(&format!("{name}.se"), mid, c.se_ratio)?)
        } else {
            None
        };
        Ok(Self {
            expand,
            depthwise: DepthwiseConv1d {
                name: format!("{name}.depthwise"),
                channels: mid,
                kernel: c.kernel,
                stride: c.stride,
            },
            dw_bn: BatchNorm::new(format!("{name}.depthwise_bn"), mid, c.bn_eps),
            se,
            project: Conv1d::new(format!("{name}.project"), mid, c.out_channels, 1, 1),
            project_bn: BatchNorm::new(format!("{name}.project_bn"), c.out_channels, c.bn_eps),
            config,
        })
    }

    pub fn has_residual(&self) -> bool {
        self.config.stride == 1 && self.config.in_channels == self.config.out_channels
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        if let Some((conv, bn)) = &self.expand {
            v.extend(conv.specs());
            v.extend(bn.specs());
        }
        v.extend(self.depthwise.specs());
        v.extend(self.dw_bn.specs());
        if let Some(se) = &self.se {
            v.extend(se.specs());
        }
        v.extend(self.project.specs());
        v.extend(self.project_bn.specs());
        v
    }

    /// `[B, C_in, N] -> [B, C_out, ceil(N / stride)]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some((conv, bn)) = &self.expand {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.tape.swish(h);
        }
        h = self.depthwise.forward(ctx, h)?;
        h = self.dw_bn.forward(ctx, h)?;
        h = ctx.tape.swish(h);
        if let Some(se) = &self.se {
            h = se.forward(ctx, h)?;
        }
        h = self.project.forward(ctx, h)?;
        h = self.project_bn.forward(ctx, h)?;
        if self.has_residual() {
            h = ctx.tape.add(h, x)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::params::{Mode, ParamStore};
    use crate::tensor::{Tape, Tensor};

    fn cfg(cin: usize, cout: usize, expansion: usize, stride: usize) -> MbConvConfig {
        MbConvConfig {
            in_channels: cin,
            out_channels: cout,
            expansion,
            kernel: 3,
            stride,
            se_ratio: 4,
            bn_eps: 1e-3,
        }
    }

    #[test]
    fn residual_rule() {
        assert!(MbConv::new("b", cfg(4, 4, 6, 1)).unwrap().has_residual());
        assert!(!MbConv::new("b", cfg(4, 4, 6, 2)).unwrap().has_residual());
        assert!(!MbConv::new("b", cfg(4, 8, 6, 1)).unwrap().has_residual());
        assert!(MbConv::new("b", cfg(4, 4, 6, 0)).is_err());
    }

    #[test]
    fn expansion_one_has_no_expand_conv() {
        let b = MbConv::new("b", cfg(4, 4, 1, 1)).unwrap();
        assert!(b.specs().iter().all(|s| !s.name.starts_with("b.expand")));
        let b = MbConv::new("b", cfg(4, 4, 6, 1)).unwrap();
        assert!(b.specs().iter().any(|s| s.name == "b.expand.weight"));
    }

    #[test]
    fn zero_branch_passes_input_through() {
        let block = MbConv::new("b", cfg(2, 2, 3, 1)).unwrap();
        let mut store = ParamStore::from_specs(&block.specs(), 1).unwrap();
        for name in ["b.expand.weight", "b.depthwise.weight", "b.project.weight"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::new(vec![1, 2, 5], (0..10).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let v = ctx.tape.constant(x.clone());
        let y = block.forward(&mut ctx, v).unwrap();
        assert!(ctx.tape.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn stride_two_halves_length() {
        let block = MbConv::new("b", cfg(2, 3, 2, 2)).unwrap();
        let store = ParamStore::from_specs(&block.specs(), 1).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let v = ctx.tape.constant(Tensor::ones(&[1, 2, 100]));
        let y = block.forward(&mut ctx, v).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 3, 50]);
    }

    #[test]
    fn se_scales_channels() {
        let se = SeBlock::new("se", 2, 4).unwrap();
        assert_eq!(se.reduced, 1);
        let mut store = ParamStore::from_specs(&se.specs(), 0).unwrap();
        // zero expand weights give s = sigmoid(bias); choose biases for s = (0.5, 1 - tiny)
        store.set("se.expand.weight", Tensor::zeros(&[1, 2])).unwrap();
        store.set("se.expand.bias", Tensor::from_slice(&[0.0, 50.0])).unwrap();
        let x = Tensor::new(vec![1, 2, 3], vec![2.0, 4.0, 6.0, 1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let v = ctx.tape.constant(x);
        let y = se.forward(&mut ctx, v).unwrap();
        let out = ctx.tape.value(y).data().to_vec();
        assert_eq!(&out[..3], &[1.0, 2.0, 3.0]);
        for (a, b) in out[3..].iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let z = ctx.tape.constant(Tensor::zeros(&[1, 2, 4]));
        let y = se.forward(&mut ctx, z).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|v| *v == 0.0));
    }
}
