//! A tiny decoder-only transformer whose only positional signal is ALiBi.
//!
//! Architecture: token embedding, `n_layers` pre-norm blocks (multi-head
//! attention, then a GELU feed-forward of width `4 * d_model`), a final layer
//! norm and an untied output projection. No biases in the attention
//! projections.

mod cache;
mod checkpoint;
mod forward;
mod train;

pub use cache::{forward_incremental, ingest, CacheBias, CacheTag, KVCache, Role};
pub use checkpoint::{load_checkpoint, loss_curve_csv, save_checkpoint};
pub use forward::{forward_full, forward_hidden, project_logits};
pub use train::{
    attention_for, corpus_loss, cross_entropy_grad, fine_tune, sentence_loss_and_grad, BiasMode, FineTuneReport, MaskMode,
    Optimizer, TrainConfig,
};

pub(crate) use forward::forward_with_acts;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alibi::{alibi_slopes, HeadSlopes};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Sequences longer than this are skipped during fine-tuning.
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            vocab_size: 64,
            seed: 0,
            max_seq_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.n_heads.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_heads must be a power of two, got {}",
                self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// `(name, rows, cols)` of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, ff, v) = (self.d_model, self.d_ff(), self.vocab_size);
        let mut shapes = vec![("embed".to_string(), v, d)];
        for l in 0..self.n_layers {
            for (name, r, c) in [
                ("ln1.gain", 1, d),
                ("ln1.offset", 1, d),
                ("attn.wq", d, d),
                ("attn.wk", d, d),
                ("attn.wv", d, d),
                ("attn.wo", d, d),
                ("ln2.gain", 1, d),
                ("ln2.offset", 1, d),
                ("ffn.w1", d, ff),
                ("ffn.b1", 1, ff),
                ("ffn.w2", ff, d),
                ("ffn.b2", 1, d),
            ] {
                shapes.push((format!("layer{l}.{name}"), r, c));
            }
        }
        shapes.push(("final_ln.gain".into(), 1, d));
        shapes.push(("final_ln.offset".into(), 1, d));
        shapes.push(("out".into(), d, v));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

// Tensor indices inside `ModelParams::tensors`.
pub(crate) const EMBED: usize = 0;
pub(crate) const PER_LAYER: usize = 12;
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const WQ: usize = 2;
pub(crate) const WK: usize = 3;
pub(crate) const WV: usize = 4;
pub(crate) const WO: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W1: usize = 8;
pub(crate) const B1: usize = 9;
pub(crate) const W2: usize = 10;
pub(crate) const B2: usize = 11;

#[inline]
pub(crate) fn layer_tensor(layer: usize, which: usize) -> usize {
    1 + layer * PER_LAYER + which
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    slopes: HeadSlopes,
    tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn from_tensors(config: ModelConfig, tensors: Vec<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), t) in shapes.iter().zip(&tensors) {
            if t.shape() != (*r, *c) {
                return Err(Error::Shape(format!(
                    "{name}: expected {r}x{c}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            slopes: alibi_slopes(config.n_heads)?,
            config,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn slopes(&self) -> &HeadSlopes {
        &self.slopes
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub(crate) fn tensor(&self, idx: usize) -> &Matrix<T> {
        &self.tensors[idx]
    }

    pub(crate) fn layer(&self, layer: usize, which: usize) -> &Matrix<T> {
        &self.tensors[layer_tensor(layer, which)]
    }

    pub(crate) fn final_tensor(&self, k: usize) -> &Matrix<T> {
        &self.tensors[1 + self.config.n_layers * PER_LAYER + k]
    }

    /// A zero-filled tensor set with this model's shapes (used for gradients).
    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect()
    }

    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// `(tensor, offset)` of a flat parameter index.
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.data().len() {
                return (i, flat);
            }
            flat -= t.data().len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn get_flat(&self, flat: usize) -> T {
        let (t, o) = self.locate(flat);
        self.tensors[t].data()[o]
    }

    pub fn set_flat(&mut self, flat: usize, v: T) {
        let (t, o) = self.locate(flat);
        self.tensors[t].data_mut()[o] = v;
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            slopes: self.slopes.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }
}

/// Deterministic initialisation from `config.seed`. Values are drawn in `f64`
/// and rounded, so `f32` and `f64` models from one seed agree to rounding.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model as f64;
    let ff = config.d_ff() as f64;
    let tensors = config
        .tensor_shapes()
        .into_iter()
        .map(|(name, rows, cols)| {
            let n = rows * cols;
            let data: Vec<T> = if name.ends_with(".gain") {
                vec![T::one(); n]
            } else if name.ends_with(".offset") || name.ends_with(".b1") || name.ends_with(".b2")
            {
                vec![T::zero(); n]
            } else {
                let std = match name.as_str() {
                    "embed" => 1.0,
                    _ if name.ends_with("ffn.w2") => 1.0 / ff.sqrt(),
                    _ => 1.0 / d.sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            };
            Matrix::from_vec(rows, cols, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(*config, tensors)
}
