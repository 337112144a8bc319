//! Bidirectional transformer denoiser over the unified vocabulary.
//!
//! Pre-norm blocks (attention, then a GELU MLP), learned absolute positions,
//! an embedding table and an untied LM head. Attention is never masked:
//! every position sees every other position.

mod forward;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use forward::{gelu, layer_norm, softmax_in_place, Example, Target};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

use crate::error::{Error, Result};
use crate::tensor::{ParamMap, Real, Tensor};
use crate::vocab::{TokenId, VocabLayout};

pub const EMBED: &str = "embed";
pub const POS: &str = "pos";
pub const HEAD: &str = "head";
pub const LN_F_GAIN: &str = "ln_f.gain";
pub const LN_F_BIAS: &str = "ln_f.bias";

pub(crate) const LN_EPS: f64 = 1e-5;

/// Axis of a tensor that is indexed by token id, if any.
pub fn vocab_axis(name: &str) -> Option<usize> {
    match name {
        EMBED => Some(0),
        HEAD => Some(1),
        _ => None,
    }
}

pub fn block_param(layer: usize, name: &str) -> String {
    format!("blocks.{layer}.{name}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub seed: u64,
    pub vocab: VocabLayout,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config("dim, heads and max_len must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        self.vocab.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        4 * self.dim
    }

    /// Every parameter name with its shape, in registry order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v) = (self.dim, self.vocab.total_size());
        let mut out = vec![(EMBED.to_string(), vec![v, d]), (POS.to_string(), vec![self.max_len, d])];
        for l in 0..self.layers {
            for (name, shape) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("Wq", vec![d, d]),
                ("Wk", vec![d, d]),
                ("Wv", vec![d, d]),
                ("Wo", vec![d, d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("W1", vec![d, self.hidden()]),
                ("W2", vec![self.hidden(), d]),
            ] {
                out.push((block_param(l, name), shape));
            }
        }
        out.push((LN_F_GAIN.to_string(), vec![d]));
        out.push((LN_F_BIAS.to_string(), vec![d]));
        out.push((HEAD.to_string(), vec![d, v]));
        out
    }

    /// Standard deviation of the initial values of a tensor; `None` for
    /// layer-norm parameters (gain 1, bias 0).
    pub fn init_std(&self, name: &str) -> Option<f64> {
        let d = self.dim as f64;
        let residual = (2.0 * self.layers.max(1) as f64).sqrt();
        let suffix = name.rsplit('.').next().unwrap_or(name);
        match suffix {
            "gain" | "bias" => None,
            EMBED | POS => Some(0.5),
            "Wq" | "Wk" | "Wv" | "W1" | HEAD => Some(1.0 / d.sqrt()),
            "Wo" => Some(1.0 / d.sqrt() / residual),
            "W2" => Some(1.0 / (4.0 * d).sqrt() / residual),
            _ => Some(1.0 / d.sqrt()),
        }
    }

    /// Checks that `params` has exactly the registry's names and shapes.
    pub fn check_params<T: Real>(&self, params: &ParamMap<T>) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in shapes {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Draws `n` values from N(0, std²).
pub(crate) fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamMap<T>,
}

impl Model<f32> {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let t = match config.init_std(&name) {
                Some(std) => Tensor::from_vec(&shape, normal_values(&mut rng, n, std))?,
                None if name.ends_with("gain") => Tensor::filled(&shape, 1.0),
                None => Tensor::zeros(&shape),
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ParamMap<T>) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab.total_size()
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Config(format!(
                "sequence of {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        let total = self.vocab_size();
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= total) {
            return Err(Error::TokenOutOfRange { id, total });
        }
        Ok(())
    }
}

/// Anything that maps a partially masked sequence to per-position logits.
pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;

    /// Row-major `[len × vocab]` logits.
    fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>>;
}

impl<T: Real> Denoiser for Model<T> {
    fn vocab_size(&self) -> usize {
        Model::vocab_size(self)
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        Ok(self.forward(tokens)?.into_iter().map(|v| v.to_f64() as f32).collect())
    }
}
