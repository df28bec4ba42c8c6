use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    /// Uniform on `[-bound, bound]`.
    Uniform { bound: f64 },
    Zeros,
    Ones,
}

/// Declaration of one named tensor owned by a block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Buffers (batch-norm running statistics) are stored and checkpointed
    /// but never optimized.
    pub trainable: bool,
    /// Included in the L2 penalty.
    pub decay: bool,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            trainable: true,
            decay: false,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            trainable: false,
            ..Self::weight(name, shape, init)
        }
    }

    pub fn decayed(mut self, decay: bool) -> Self {
        self.decay = decay;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Initial value of `spec`. The stream depends only on the seed and the
/// tensor name, so adding or removing other tensors never changes it.
pub fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    let n = spec.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&spec.name));
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        Init::HeNormal { fan_in } => {
            let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape")
}

/// Every named tensor of a model, trainable or not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    specs: BTreeMap<String, ParamSpec>,
}

impl ParamStore {
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = Self::default();
        for spec in specs {
            if store.specs.contains_key(&spec.name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter name `{}`",
                    spec.name
                )));
            }
            store.tensors.insert(spec.name.clone(), init_tensor(spec, seed));
            store.specs.insert(spec.name.clone(), spec.clone());
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Replaces a tensor, keeping its declared shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value.with_requires_grad(false);
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.tensors
            .get_mut(name)
            .map(|t| t.data_mut())
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// All tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn specs(&self) -> impl Iterator<Item = &ParamSpec> {
        self.specs.values()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.specs
            .values()
            .filter(|s| s.trainable)
            .map(|s| s.name.clone())
            .collect()
    }

    pub fn decayed_names(&self) -> Vec<String> {
        self.specs
            .values()
            .filter(|s| s.decay)
            .map(|s| s.name.clone())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.specs.values().filter(|s| s.trainable).map(|s| s.numel()).sum()
    }

    /// Number of non-trainable scalars (running statistics).
    pub fn buffer_count(&self) -> usize {
        self.specs.values().filter(|s| !s.trainable).map(|s| s.numel()).sum()
    }

    /// Moves running statistics toward the batch statistics:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_bn_update(&mut self, update: &BnUpdate, momentum: f64) -> Result<()> {
        for (suffix, batch) in [("running_mean", &update.mean), ("running_var", &update.var)] {
            let name = format!("{}.{suffix}", update.prefix);
            let data = self.data_mut(&name)?;
            for (r, b) in data.iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a train pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// State threaded through a forward pass: the tape, parameter lookup, mode,
/// dropout randomness and pending batch-norm updates.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    mode: Mode,
    track: bool,
    bound: HashMap<String, Var>,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            track: false,
            bound: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    /// Seeds the dropout stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// When set, parameters enter the tape as gradient-tracked leaves.
    pub fn tracking(mut self, track: bool) -> Self {
        self.track = track;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Uses `var` for parameter `name` instead of the stored tensor.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone().with_requires_grad(self.track);
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a [f64]> {
        Ok(self.store.get(name)?.data())
    }

    /// Parameters placed on the tape so far, by name.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}
