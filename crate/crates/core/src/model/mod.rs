//! Seeded decoder-only multimodal transformer.
//!
//! Vision embeddings are projected into the model width and placed in front of
//! the instruction tokens; generated tokens follow. Positions are absolute and
//! survive pruning: a dropped vision token leaves a gap, nothing is re-indexed.

mod cache;
mod checkpoint;
mod sequence;

pub use cache::{CapturedRow, KvCache, PassCost, PruneState, StepOutput};
pub use checkpoint::{load_checkpoint, save_checkpoint, TensorEntry, CHECKPOINT_FORMAT};
pub use sequence::TokenSequence;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{gelu, layer_norm, matmul, vec_matmul, Matrix, NumericError, LAYER_NORM_EPS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("weight {name} has shape {got:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("capture layer {layer} outside 1..={n_layers}")]
    CaptureLayer { layer: usize, n_layers: usize },
    #[error("prune layer {layer} outside 0..={n_layers}")]
    PruneLayer { layer: usize, n_layers: usize },
    #[error("sequence needs at least one vision embedding")]
    EmptyVision,
    #[error("sequence needs at least one instruction token")]
    EmptyInstruction,
    #[error("vision input width {got} does not match {expected}")]
    VisionWidth { expected: usize, got: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("cache does not fit this model: {0}")]
    CacheMismatch(String),
    #[error("kept vision index {index} outside 0..{n_vision}")]
    PruneIndex { index: usize, n_vision: usize },
    #[error("kept vision index {0} listed twice")]
    DuplicateIndex(usize),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    LayerNorm,
    /// Pass-through; used by hand-constructed models that need exact arithmetic.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub d_vision: usize,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default)]
    pub norm: NormKind,
}

impl ModelConfig {
    /// Small config used throughout the tests: 2 layers, 2 heads, width 8.
    pub fn tiny(seed: u64) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 16,
            vocab_size: 16,
            d_vision: 8,
            max_seq: 64,
            seed,
            norm: NormKind::LayerNorm,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_heads == 0 || self.d_head == 0 {
            return bad("n_heads and d_head must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.n_layers < 2 {
            return bad(format!("n_layers must be >= 2, got {}", self.n_layers));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.d_ff == 0 || self.d_vision == 0 || self.max_seq < 2 {
            return bad("d_ff, d_vision must be positive and max_seq >= 2".into());
        }
        Ok(())
    }

    pub fn attention_scale(&self) -> f32 {
        1.0 / (self.d_head as f32).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormWeights {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl NormWeights {
    pub fn unit(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: NormWeights,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm2: NormWeights,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

impl LayerWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            norm1: NormWeights::unit(d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            norm2: NormWeights::unit(d),
            w1: Matrix::zeros(d, cfg.d_ff),
            b1: vec![0.0; cfg.d_ff],
            w2: Matrix::zeros(cfg.d_ff, d),
            b2: vec![0.0; d],
        }
    }
}

/// Full parameter set. Public so test oracles and hand-built models can be
/// assembled directly; [`Model::from_weights`] checks every shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Matrix,
    pub vision_projection: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormWeights,
    pub unembedding: Matrix,
    pub unembedding_bias: Vec<f32>,
}

impl ModelWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            token_embedding: Matrix::zeros(cfg.vocab_size, d),
            vision_projection: Matrix::zeros(cfg.d_vision, d),
            position_embedding: Matrix::zeros(cfg.max_seq, d),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            final_norm: NormWeights::unit(d),
            unembedding: Matrix::zeros(d, cfg.vocab_size),
            unembedding_bias: vec![0.0; cfg.vocab_size],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    /// Random weights drawn uniformly from `[-s, s]`, `s = 1/sqrt(d_model)`,
    /// in a fixed tensor order from a ChaCha stream seeded by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.d_model as f32).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-scale..=scale))
                .collect();
            Matrix::new(rows, cols, data).expect("sized by construction")
        };
        let d = config.d_model;
        let token_embedding = draw(config.vocab_size, d);
        let vision_projection = draw(config.d_vision, d);
        let position_embedding = draw(config.max_seq, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                norm1: NormWeights::unit(d),
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                norm2: NormWeights::unit(d),
                w1: draw(d, config.d_ff),
                b1: vec![0.0; config.d_ff],
                w2: draw(config.d_ff, d),
                b2: vec![0.0; d],
            })
            .collect();
        let unembedding = draw(d, config.vocab_size);
        let weights = ModelWeights {
            token_embedding,
            vision_projection,
            position_embedding,
            layers,
            final_norm: NormWeights::unit(d),
            unembedding,
            unembedding_bias: vec![0.0; config.vocab_size],
        };
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let check = |name: &str, m: &Matrix, expected: (usize, usize)| {
            if m.shape() != expected {
                return Err(ModelError::WeightShape {
                    name: name.to_string(),
                    expected,
                    got: m.shape(),
                });
            }
            if !m.is_finite() {
                return Err(ModelError::Numeric(NumericError::NonFinite("weights")));
            }
            Ok(())
        };
        let check_vec = |name: &str, v: &[f32], n: usize| {
            if v.len() != n {
                return Err(ModelError::WeightShape {
                    name: name.to_string(),
                    expected: (1, n),
                    got: (1, v.len()),
                });
            }
            Ok(())
        };
        check("token_embedding", &weights.token_embedding, (config.vocab_size, d))?;
        check("vision_projection", &weights.vision_projection, (config.d_vision, d))?;
        check("position_embedding", &weights.position_embedding, (config.max_seq, d))?;
        if weights.layers.len() != config.n_layers {
            return Err(ModelError::InvalidConfig(format!(
                "{} layer weight sets for {} layers",
                weights.layers.len(),
                config.n_layers
            )));
        }
        for (i, l) in weights.layers.iter().enumerate() {
            check(&format!("layers.{i}.wq"), &l.wq, (d, d))?;
            check(&format!("layers.{i}.wk"), &l.wk, (d, d))?;
            check(&format!("layers.{i}.wv"), &l.wv, (d, d))?;
            check(&format!("layers.{i}.wo"), &l.wo, (d, d))?;
            check(&format!("layers.{i}.w1"), &l.w1, (d, config.d_ff))?;
            check(&format!("layers.{i}.w2"), &l.w2, (config.d_ff, d))?;
            check_vec(&format!("layers.{i}.b1"), &l.b1, config.d_ff)?;
            check_vec(&format!("layers.{i}.b2"), &l.b2, d)?;
            for (n, norm) in [("norm1", &l.norm1), ("norm2", &l.norm2)] {
                check_vec(&format!("layers.{i}.{n}.gamma"), &norm.gamma, d)?;
                check_vec(&format!("layers.{i}.{n}.beta"), &norm.beta, d)?;
            }
        }
        check_vec("final_norm.gamma", &weights.final_norm.gamma, d)?;
        check_vec("final_norm.beta", &weights.final_norm.beta, d)?;
        check("unembedding", &weights.unembedding, (d, config.vocab_size))?;
        check_vec("unembedding_bias", &weights.unembedding_bias, config.vocab_size)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// FNV-1a over the bit patterns of every parameter, in checkpoint order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, _, data) in checkpoint::tensor_views(&self.weights) {
            for v in data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Projects raw `n x d_vision` vision features and pairs them with the
    /// instruction ids.
    pub fn build_sequence(
        &self,
        vision: &Matrix,
        instruction_ids: &[u32],
    ) -> Result<TokenSequence, ModelError> {
        if vision.rows() == 0 {
            return Err(ModelError::EmptyVision);
        }
        if vision.cols() != self.config.d_vision {
            return Err(ModelError::VisionWidth {
                expected: self.config.d_vision,
                got: vision.cols(),
            });
        }
        let projected = matmul(vision, &self.weights.vision_projection)?;
        for &t in instruction_ids {
            self.check_token(t)?;
        }
        TokenSequence::new(projected, instruction_ids.to_vec())
    }

    pub(crate) fn check_token(&self, t: u32) -> Result<(), ModelError> {
        if (t as usize) >= self.config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn check_capture(&self, layer: usize) -> Result<(), ModelError> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(ModelError::CaptureLayer {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        Ok(())
    }

    fn norm(&self, x: &[f32], w: &NormWeights) -> Vec<f32> {
        match self.config.norm {
            NormKind::LayerNorm => layer_norm(x, &w.gamma, &w.beta, LAYER_NORM_EPS),
            NormKind::Identity => x.to_vec(),
        }
    }

    fn norm_rows(&self, x: &Matrix, w: &NormWeights) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.norm(x.row(r), w));
        }
        out
    }

    /// Embedding of the token at `pos` in `seq` (vision projection or token
    /// table) plus its absolute position embedding.
    pub(crate) fn embed_position(&self, seq: &TokenSequence, pos: usize) -> Vec<f32> {
        let base: &[f32] = match seq.token_at(pos) {
            sequence::Slot::Vision(r) => seq.vision().row(r),
            sequence::Slot::Token(t) => self.weights.token_embedding.row(t as usize),
        };
        let p = self.weights.position_embedding.row(pos);
        base.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    pub(crate) fn embed_token(&self, token: u32, pos: usize) -> Vec<f32> {
        let t = self.weights.token_embedding.row(token as usize);
        let p = self.weights.position_embedding.row(pos);
        t.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    /// Logits for one final-layer hidden state.
    pub fn unembed(&self, hidden: &[f32]) -> Result<Vec<f32>, ModelError> {
        let h = self.norm(hidden, &self.weights.final_norm);
        let mut logits = vec_matmul(&h, &self.weights.unembedding)?;
        for (l, b) in logits.iter_mut().zip(&self.weights.unembedding_bias) {
            *l += b;
        }
        Ok(logits)
    }

    /// Query/key/value projections of normed hidden rows for layer `l`.
    pub fn project_qkv(&self, l: usize, x: &Matrix) -> Result<(Matrix, Matrix, Matrix), ModelError> {
        let lw = &self.weights.layers[l];
        let h = self.norm_rows(x, &lw.norm1);
        Ok((matmul(&h, &lw.wq)?, matmul(&h, &lw.wk)?, matmul(&h, &lw.wv)?))
    }

    /// Residual update after attention: output projection, MLP, both residuals.
    pub fn finish_layer(&self, l: usize, x: &Matrix, attn: &Matrix) -> Result<Matrix, ModelError> {
        let lw = &self.weights.layers[l];
        let mut x2 = matmul(attn, &lw.wo)?;
        x2.add_assign(x)?;
        let h2 = self.norm_rows(&x2, &lw.norm2);
        let mut hidden = matmul(&h2, &lw.w1)?;
        for r in 0..hidden.rows() {
            for (v, b) in hidden.row_mut(r).iter_mut().zip(&lw.b1) {
                *v = gelu(*v + b);
            }
        }
        let mut out = matmul(&hidden, &lw.w2)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&lw.b2) {
                *v += b;
            }
        }
        out.add_assign(&x2)?;
        Ok(out)
    }

    /// Multiply-accumulates for one token through one layer that attends over
    /// `live` keys.
    pub fn layer_macs(&self, live: usize) -> u64 {
        let d = self.config.d_model as u64;
        4 * d * d + 2 * d * live as u64 + 2 * d * self.config.d_ff as u64
    }

    pub fn unembed_macs(&self) -> u64 {
        (self.config.d_model * self.config.vocab_size) as u64
    }
}
