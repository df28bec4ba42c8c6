use super::layers::Dense;
use super::params::{Ctx, Init, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// `V x D` lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            vocab,
            dim,
        }
    }

    pub fn table_name(&self) -> String {
        format!("{}.table", self.name)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let bound = 1.0 / (self.vocab.max(1) as f64).sqrt();
        vec![ParamSpec::weight(
            self.table_name(),
            &[self.vocab, self.dim],
            Init::Uniform { bound },
        )]
    }

    /// Rows at `indices`, shape `[len, D]`.
    pub fn forward(&self, ctx: &mut Ctx, indices: &[usize]) -> Result<Var> {
        let table = ctx.param(&self.table_name())?;
        ctx.tape.gather(table, indices)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionConfig {
    /// Width of the age/gender embeddings.
    pub embed_dim: usize,
    /// Width of the ECG feature used as the value source.
    pub feature_dim: usize,
    /// Token count `L_e`.
    pub tokens: usize,
    /// Shared projection width `d` per token.
    pub width: usize,
    pub use_age: bool,
    pub use_gender: bool,
    /// Divide attention logits by `sqrt(d)`.
    pub scaled: bool,
}

/// Cross-attention between age and gender embeddings applied to the ECG
/// feature.
///
/// Each embedding is projected to `L_e` query and key tokens of width `d`,
/// and the ECG feature to `L_e` value tokens. With both modalities the two
/// maps `softmax(Q_a K_g^T)` and `softmax(Q_g K_a^T)` are summed and applied
/// to the values; with one modality its own queries and keys are used. The
/// result is flattened, aligned back to the feature width by a linear layer
/// and concatenated after the ECG feature.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionFusion {
    pub name: String,
    pub config: CrossAttentionConfig,
    align: Dense,
}

impl CrossAttentionFusion {
    pub fn new(name: &str, config: CrossAttentionConfig) -> Result<Self> {
        if !(config.use_age || config.use_gender) {
            return Err(Error::InvalidArgument(
                "cross-attention needs at least one of age and gender".into(),
            ));
        }
        if config.tokens == 0 || config.width == 0 || config.embed_dim == 0 || config.feature_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "cross-attention dimensions must be positive: {config:?}"
            )));
        }
        let flat = config.tokens * config.width;
        Ok(Self {
            name: name.to_string(),
            align: Dense::new(format!("{name}.align"), flat, config.feature_dim),
            config,
        })
    }

    fn proj(&self, s: &str) -> String {
        format!("{}.{s}", self.name)
    }

    /// Output width: the ECG feature followed by its attended copy.
    pub fn output_dim(&self) -> usize {
        2 * self.config.feature_dim
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let flat = c.tokens * c.width;
        let qk = Init::HeNormal { fan_in: c.embed_dim };
        let mut v = Vec::new();
        let mut add = |name: &str, rows: usize, init| v.push(ParamSpec::weight(self.proj(name), &[rows, flat], init));
        if c.use_age {
            add("query_age", c.embed_dim, qk);
            add("key_age", c.embed_dim, qk);
        }
        if c.use_gender {
            add("query_gender", c.embed_dim, qk);
            add("key_gender", c.embed_dim, qk);
        }
        add("value", c.feature_dim, Init::HeNormal { fan_in: c.feature_dim });
        v.extend(self.align.specs());
        v
    }

    /// `[B, D] -> [B, L_e, d]`.
    fn tokens(&self, ctx: &mut Ctx, x: Var, param: &str) -> Result<Var> {
        let b = ctx.tape.shape(x)[0];
        let w = ctx.param(&self.proj(param))?;
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.reshape(y, &[b, self.config.tokens, self.config.width])
    }

    fn attend(&self, ctx: &mut Ctx, q: Var, k: Var) -> Result<Var> {
        let kt = ctx.tape.transpose(k)?;
        let mut logits = ctx.tape.matmul(q, kt)?;
        if self.config.scaled {
            logits = ctx.tape.scale(logits, 1.0 / (self.config.width as f64).sqrt());
        }
        ctx.tape.softmax(logits, 2)
    }

    /// Attention maps `[B, L_e, L_e]`, each row-stochastic: `[a2g, g2a]` with
    /// both modalities, otherwise the single self-attention map.
    pub fn attention_maps(&self, ctx: &mut Ctx, age: Option<Var>, gender: Option<Var>) -> Result<Vec<Var>> {
        let c = &self.config;
        let age = if c.use_age {
            Some(age.ok_or(Error::MissingInput("age"))?)
        } else {
            None
        };
        let gender = if c.use_gender {
            Some(gender.ok_or(Error::MissingInput("gender"))?)
        } else {
            None
        };
        match (age, gender) {
            (Some(a), Some(g)) => {
                let qa = self.tokens(ctx, a, "query_age")?;
                let ka = self.tokens(ctx, a, "key_age")?;
                let qg = self.tokens(ctx, g, "query_gender")?;
                let kg = self.tokens(ctx, g, "key_gender")?;
                Ok(vec![self.attend(ctx, qa, kg)?, self.attend(ctx, qg, ka)?])
            }
            (Some(a), None) => {
                let q = self.tokens(ctx, a, "query_age")?;
                let k = self.tokens(ctx, a, "key_age")?;
                Ok(vec![self.attend(ctx, q, k)?])
            }
            (None, Some(g)) => {
                let q = self.tokens(ctx, g, "query_gender")?;
                let k = self.tokens(ctx, g, "key_gender")?;
                Ok(vec![self.attend(ctx, q, k)?])
            }
            (None, None) => unreachable!("checked at construction"),
        }
    }

    /// `ecg: [B, F]`, embeddings `[B, D]` -> `[B, 2F]`.
    pub fn forward(&self, ctx: &mut Ctx, ecg: Var, age: Option<Var>, gender: Option<Var>) -> Result<Var> {
        let maps = self.attention_maps(ctx, age, gender)?;
        let mut ca = maps[0];
        for m in &maps[1..] {
            ca = ctx.tape.add(ca, *m)?;
        }
        let values = self.tokens(ctx, ecg, "value")?;
        let attended = ctx.tape.matmul(ca, values)?;
        let b = ctx.tape.shape(ecg)[0];
        let flat = ctx.tape.reshape(attended, &[b, self.config.tokens * self.config.width])?;
        let aligned = self.align.forward(ctx, flat)?;
        ctx.tape.concat(&[ecg, aligned], 1)
    }
}

/// Age in whole years to bin index: `min(age / width, bins - 1)`.
pub fn age_bin(age: u32, width: u32, bins: usize) -> usize {
    ((age / width.max(1)) as usize).min(bins.saturating_sub(1))
}
