use rand::Rng;

use super::params::{BnUpdate, Ctx, Init, Mode, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor, Var};

/// Fully connected layer on `[B, in]` inputs: `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
    /// Weight participates in the L2 penalty.
    pub decay: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            bias: true,
            decay: false,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn decayed(mut self) -> Self {
        self.decay = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::weight(
            self.weight_name(),
            &[self.input, self.output],
            Init::HeNormal { fan_in: self.input },
        )
        .decayed(self.decay)];
        if self.bias {
            v.push(ParamSpec::weight(self.bias_name(), &[self.output], Init::Zeros));
        }
        v
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let y = ctx.tape.matmul(x, w)?;
        if self.bias {
            let b = ctx.param(&self.bias_name())?;
            ctx.tape.add_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Bias-free 1D convolution with "same" padding on `[B, C_in, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::weight(
            self.weight_name(),
            &[self.out_channels, self.in_channels, self.kernel],
            Init::HeNormal {
                fan_in: self.in_channels * self.kernel,
            },
        )]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        ctx.tape.conv1d(x, w, self.stride, Padding::Same)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv1d {
    pub name: String,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl DepthwiseConv1d {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::weight(
            self.weight_name(),
            &[self.channels, self.kernel],
            Init::HeNormal { fan_in: self.kernel },
        )]
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        ctx.tape.depthwise_conv1d(x, w, self.stride, Padding::Same)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize, eps: f64) -> Self {
        Self {
            name: name.into(),
            channels,
            eps,
        }
    }

    fn sub(&self, s: &str) -> String {
        format!("{}.{s}", self.name)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let c = [self.channels];
        vec![
            ParamSpec::weight(self.sub("gamma"), &c, Init::Ones),
            ParamSpec::weight(self.sub("beta"), &c, Init::Zeros),
            ParamSpec::buffer(self.sub("running_mean"), &c, Init::Zeros),
            ParamSpec::buffer(self.sub("running_var"), &c, Init::Ones),
        ]
    }

    /// Train mode normalizes with batch statistics and records them for the
    /// running-average update; eval mode uses the stored running statistics.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(&self.sub("gamma"))?;
        let beta = ctx.param(&self.sub("beta"))?;
        match ctx.mode() {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                ctx.record_bn(BnUpdate {
                    prefix: self.name.clone(),
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = ctx.buffer(&self.sub("running_mean"))?;
                let rv = ctx.buffer(&self.sub("running_var"))?;
                ctx.tape.batch_norm_eval(x, gamma, beta, rm, rv, self.eps)
            }
        }
    }
}

/// Inverted dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Eval mode and rate 0 return `x` itself. In train mode each element is
    /// kept with probability `1 - rate` and scaled by `1 / (1 - rate)`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        if ctx.mode() == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let shape = ctx.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| if ctx.rng().random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        ctx.tape.mul_const(x, &Tensor::new(shape, mask)?)
    }
}
