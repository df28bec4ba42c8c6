//! The full classifier: convolutional stem, MBConv stages, pooled features
//! joined with LSTM-autoencoder latents of the R-peak and P-wave sequences,
//! optional age/gender fusion, and a two-layer dense head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};

use serde::{Deserialize, Serialize};

use crate::blocks::{
    age_bin, BatchNorm, Conv1d, CrossAttentionConfig, CrossAttentionFusion, Ctx, Dense, Dropout, Embedding,
    LstmAutoencoder, MbConv, MbConvConfig, Mode, ParamSpec, ParamStore, StageConfig,
};
use crate::error::{Error, Result};
use crate::signal::{FiducialFeature, Gender};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Mutually exclusive classes.
    Softmax,
    /// Independent per-class probabilities (multi-label).
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub enabled: bool,
    pub embed_dim: usize,
    /// Ages are bucketed as `min(age / age_bin_width, age_bins - 1)`.
    pub age_bin_width: u32,
    pub age_bins: usize,
    pub use_age: bool,
    pub use_gender: bool,
    pub use_cross_attention: bool,
    /// Number of attention tokens the ECG feature is projected to.
    pub tokens: usize,
    pub token_width: usize,
    pub scaled_attention: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            embed_dim: 16,
            age_bin_width: 10,
            age_bins: 10,
            use_age: true,
            use_gender: true,
            use_cross_attention: true,
            tokens: 8,
            token_width: 16,
            scaled_attention: false,
        }
    }
}

impl FusionConfig {
    pub fn uses_age(&self) -> bool {
        self.enabled && self.use_age
    }

    pub fn uses_gender(&self) -> bool {
        self.enabled && self.use_gender
    }
}

/// 1D transliteration of the EfficientNet-B0 stage table.
pub fn default_stages() -> Vec<StageConfig> {
    let row = |expansion, out_channels, kernel, stride, repeats| StageConfig {
        expansion,
        out_channels,
        kernel,
        stride,
        repeats,
        se_ratio: 4,
    };
    vec![
        row(1, 16, 3, 1, 1),
        row(6, 24, 9, 2, 2),
        row(6, 40, 15, 2, 2),
        row(6, 80, 9, 2, 3),
        row(6, 112, 15, 1, 3),
        row(6, 192, 15, 2, 4),
        row(6, 320, 9, 1, 1),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub leads: usize,
    pub input_length: usize,
    pub class_count: usize,
    pub head: Head,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub fc_hidden: usize,
    pub dropout_rate: f64,
    /// Hidden width of each fiducial autoencoder.
    pub ae_hidden: usize,
    /// Feed R-peak and P-wave sequence latents into the head.
    pub use_fiducials: bool,
    /// Weight of the autoencoder reconstruction term; 0 leaves it out.
    pub reconstruction_weight: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub fusion: FusionConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            leads: 1,
            input_length: 187,
            class_count: 5,
            head: Head::Softmax,
            stem_channels: 32,
            stem_kernel: 3,
            stem_stride: 2,
            stages: default_stages(),
            fc_hidden: 128,
            dropout_rate: 0.2,
            ae_hidden: 16,
            use_fiducials: true,
            reconstruction_weight: 0.0,
            bn_eps: 1e-3,
            bn_momentum: 0.9,
            fusion: FusionConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Temporal length after the stem and every stage.
    pub fn feature_lengths(&self) -> Result<Vec<usize>> {
        let mut n = self.input_length;
        let mut out = Vec::new();
        let strides = std::iter::once(self.stem_stride).chain(self.stages.iter().map(|s| s.stride));
        for (i, stride) in strides.enumerate() {
            if stride == 0 || n < stride {
                return Err(Error::InvalidArgument(format!(
                    "stride {stride} at layer {i} cannot reduce length {n}"
                )));
            }
            n = n.div_ceil(stride);
            out.push(n);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.leads == 0 || self.input_length == 0 || self.class_count == 0 {
            return bad("leads, input_length and class_count must be positive".into());
        }
        if self.stem_channels == 0 || self.stem_kernel == 0 || self.fc_hidden == 0 {
            return bad("stem and head widths must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.expansion == 0 || s.out_channels == 0 || s.kernel == 0 || s.stride == 0 || s.repeats == 0 {
                return bad(format!("stage {i} has a zero field: {s:?}"));
            }
        }
        self.feature_lengths()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.use_fiducials && self.ae_hidden == 0 {
            return bad("ae_hidden must be positive when fiducials are used".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must lie in [0, 1) and bn_eps be positive".into());
        }
        let f = &self.fusion;
        if f.enabled {
            if !(f.use_age || f.use_gender) {
                return bad("fusion needs use_age or use_gender".into());
            }
            if f.embed_dim == 0 || f.tokens == 0 || f.token_width == 0 || f.age_bins == 0 || f.age_bin_width == 0 {
                return bad("fusion dimensions must be positive".into());
            }
        }
        Ok(())
    }

    fn last_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    /// Width of the ECG feature: pooled channels plus both latents.
    pub fn feature_dim(&self) -> usize {
        self.last_channels() + if self.use_fiducials { 2 * self.ae_hidden } else { 0 }
    }

    /// Width entering the dense head.
    pub fn head_input_dim(&self) -> usize {
        let f = &self.fusion;
        let feature = self.feature_dim();
        if !f.enabled {
            feature
        } else if f.use_cross_attention {
            2 * feature
        } else {
            feature + f.embed_dim * (f.use_age as usize + f.use_gender as usize)
        }
    }
}

/// One batch of model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[B, leads, input_length]`.
    pub signals: Tensor,
    pub r_peaks: Vec<FiducialFeature>,
    pub p_waves: Vec<FiducialFeature>,
    pub ages: Vec<Option<u32>>,
    pub genders: Vec<Option<Gender>>,
}

impl ModelInput {
    pub fn batch_size(&self) -> usize {
        self.signals.shape().first().copied().unwrap_or(0)
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Softmax or sigmoid of the logits, `[B, K]`.
    pub scores: Var,
    /// Mean reconstruction error of both autoencoders, when configured.
    pub reconstruction: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
struct Network {
    stem: Conv1d,
    stem_bn: BatchNorm,
    blocks: Vec<MbConv>,
    r_ae: Option<LstmAutoencoder>,
    p_ae: Option<LstmAutoencoder>,
    age_embedding: Option<Embedding>,
    gender_embedding: Option<Embedding>,
    attention: Option<CrossAttentionFusion>,
    fc1: Dense,
    dropout: Dropout,
    fc2: Dense,
}

impl Network {
    fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut channels = cfg.stem_channels;
        for stage in &cfg.stages {
            for r in 0..stage.repeats {
                let block = MbConv::new(
                    &format!("blocks.{}", blocks.len()),
                    MbConvConfig {
                        in_channels: channels,
                        out_channels: stage.out_channels,
                        expansion: stage.expansion,
                        kernel: stage.kernel,
                        stride: if r == 0 { stage.stride } else { 1 },
                        se_ratio: stage.se_ratio,
                        bn_eps: cfg.bn_eps,
                    },
                )?;
                blocks.push(block);
                channels = stage.out_channels;
            }
        }
        let f = &cfg.fusion;
        let ae = |name: &str| cfg.use_fiducials.then(|| LstmAutoencoder::new(name, cfg.ae_hidden));
        let attention = if f.enabled && f.use_cross_attention {
            Some(CrossAttentionFusion::new(
                "fusion.attention",
                CrossAttentionConfig {
                    embed_dim: f.embed_dim,
                    feature_dim: cfg.feature_dim(),
                    tokens: f.tokens,
                    width: f.token_width,
                    use_age: f.use_age,
                    use_gender: f.use_gender,
                    scaled: f.scaled_attention,
                },
            )?)
        } else {
            None
        };
        Ok(Self {
            stem: Conv1d::new("stem.conv", cfg.leads, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride),
            stem_bn: BatchNorm::new("stem.bn", cfg.stem_channels, cfg.bn_eps),
            blocks,
            r_ae: ae("fiducial.r_peak"),
            p_ae: ae("fiducial.p_wave"),
            age_embedding: f
                .uses_age()
                .then(|| Embedding::new("fusion.age_embedding", f.age_bins, f.embed_dim)),
            gender_embedding: f
                .uses_gender()
                .then(|| Embedding::new("fusion.gender_embedding", 2, f.embed_dim)),
            attention,
            fc1: Dense::new("head.fc1", cfg.head_input_dim(), cfg.fc_hidden).decayed(),
            dropout: Dropout::new(cfg.dropout_rate)?,
            fc2: Dense::new("head.fc2", cfg.fc_hidden, cfg.class_count).decayed(),
        })
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let mut v = self.stem.specs();
        v.extend(self.stem_bn.specs());
        for b in &self.blocks {
            v.extend(b.specs());
        }
        for ae in [&self.r_ae, &self.p_ae].into_iter().flatten() {
            v.extend(ae.specs());
        }
        for e in [&self.age_embedding, &self.gender_embedding].into_iter().flatten() {
            v.extend(e.specs());
        }
        if let Some(a) = &self.attention {
            v.extend(a.specs());
        }
        v.extend(self.fc1.specs());
        v.extend(self.fc2.specs());
        v
    }
}

/// A built model: configuration, block graph and parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    net: Network,
    params: ParamStore,
}

impl Model {
    /// Builds the network and initializes every tensor from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let net = Network::new(&config)?;
        let params = ParamStore::from_specs(&net.specs(), config.seed)?;
        Ok(Self { config, net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn block_count(&self) -> usize {
        self.net.blocks.len()
    }

    /// Residual flag of every MBConv block in order.
    pub fn residual_flags(&self) -> Vec<bool> {
        self.net.blocks.iter().map(|b| b.has_residual()).collect()
    }

    fn check_input(&self, input: &ModelInput) -> Result<usize> {
        let cfg = &self.config;
        let s = input.signals.shape();
        if s.len() != 3 || s[1] != cfg.leads || s[2] != cfg.input_length {
            return Err(Error::shape(
                "model input",
                format!(
                    "expected [batch, {} leads, {} samples], got {:?}",
                    cfg.leads, cfg.input_length, s
                ),
            ));
        }
        let b = s[0];
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if cfg.use_fiducials && (input.r_peaks.len() != b || input.p_waves.len() != b) {
            return Err(Error::shape(
                "model input",
                format!(
                    "{b} signals but {} R-peak and {} P-wave sequences",
                    input.r_peaks.len(),
                    input.p_waves.len()
                ),
            ));
        }
        if cfg.fusion.uses_age() && (input.ages.len() != b || input.ages.iter().any(|a| a.is_none())) {
            return Err(Error::MissingInput("age"));
        }
        if cfg.fusion.uses_gender() && (input.genders.len() != b || input.genders.iter().any(|g| g.is_none())) {
            return Err(Error::MissingInput("gender"));
        }
        Ok(b)
    }

    /// ECG feature `[B, F]`, plus the reconstruction term when configured.
    fn features(&self, ctx: &mut Ctx, input: &ModelInput) -> Result<(Var, Option<Var>)> {
        let net = &self.net;
        let x = ctx.tape.constant(input.signals.clone());
        let mut h = net.stem.forward(ctx, x)?;
        h = net.stem_bn.forward(ctx, h)?;
        h = ctx.tape.swish(h);
        for block in &net.blocks {
            h = block.forward(ctx, h)?;
        }
        let pooled = ctx.tape.global_avg_pool(h)?;
        let (Some(r_ae), Some(p_ae)) = (&net.r_ae, &net.p_ae) else {
            return Ok((pooled, None));
        };
        let scale = self.config.input_length as f64;
        let zr = r_ae.encode(ctx, &input.r_peaks, scale)?;
        let zp = p_ae.encode(ctx, &input.p_waves, scale)?;
        let mut recon = None;
        if self.config.reconstruction_weight > 0.0 {
            let terms = [
                r_ae.reconstruction_loss(ctx, zr, &input.r_peaks, scale)?,
                p_ae.reconstruction_loss(ctx, zp, &input.p_waves, scale)?,
            ];
            for t in terms.into_iter().flatten() {
                recon = Some(match recon {
                    Some(acc) => ctx.tape.add(acc, t)?,
                    None => t,
                });
            }
        }
        Ok((ctx.tape.concat(&[pooled, zr, zp], 1)?, recon))
    }

    /// Full forward pass on an existing context.
    pub fn run(&self, ctx: &mut Ctx, input: &ModelInput) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let (mut feature, reconstruction) = self.features(ctx, input)?;
        let f = &self.config.fusion;
        let age = match &self.net.age_embedding {
            Some(e) => {
                let idx: Vec<usize> = input
                    .ages
                    .iter()
                    .map(|a| age_bin(a.expect("checked"), f.age_bin_width, f.age_bins))
                    .collect();
                Some(e.forward(ctx, &idx)?)
            }
            None => None,
        };
        let gender = match &self.net.gender_embedding {
            Some(e) => {
                let idx: Vec<usize> = input.genders.iter().map(|g| g.expect("checked").index()).collect();
                Some(e.forward(ctx, &idx)?)
            }
            None => None,
        };
        if let Some(att) = &self.net.attention {
            feature = att.forward(ctx, feature, age, gender)?;
        } else if f.enabled {
            let parts: Vec<Var> = std::iter::once(feature).chain(age).chain(gender).collect();
            feature = ctx.tape.concat(&parts, 1)?;
        }
        let h = self.net.fc1.forward(ctx, feature)?;
        let h = ctx.tape.relu(h);
        let h = self.net.dropout.forward(ctx, h)?;
        let logits = self.net.fc2.forward(ctx, h)?;
        let scores = match self.config.head {
            Head::Softmax => ctx.tape.softmax(logits, 1)?,
            Head::Sigmoid => ctx.tape.sigmoid(logits),
        };
        Ok(ForwardOutput {
            logits,
            scores,
            reconstruction,
        })
    }

    /// Eval-mode class scores `[B, K]`.
    pub fn forward(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, Mode::Eval);
        let out = self.run(&mut ctx, input)?;
        Ok(ctx.tape.value(out.scores).clone())
    }

    /// Names of the tensors in the L2 penalty (dense head weights).
    pub fn decayed_names(&self) -> Vec<String> {
        self.params.decayed_names()
    }
}

/// Predicted label sets: argmax for a softmax head, `{c : s_c >= t_c}` for a
/// sigmoid head.
pub fn predict(scores: &Tensor, head: Head, thresholds: &[f64]) -> Result<Vec<Vec<usize>>> {
    let [_, k] = scores.shape()[..] else {
        return Err(Error::shape("predict", format!("scores must be [B, K], got {:?}", scores.shape())));
    };
    if thresholds.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} thresholds for {k} classes",
            thresholds.len()
        )));
    }
    Ok(scores
        .data()
        .chunks(k)
        .map(|row| match head {
            Head::Softmax => {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
                vec![best]
            }
            Head::Sigmoid => (0..k).filter(|&c| row[c] >= thresholds[c]).collect(),
        })
        .collect())
}
