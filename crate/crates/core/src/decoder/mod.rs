//! Two-branch decoding: an expert pass over the full input and an amateur
//! pass over a degraded one, combined per step before sampling.
//!
//! The self-introspective amateur shares the expert's first `capture_layer`
//! layers and sees only a selected subset of vision tokens above them. The
//! baselines build their amateur from a disturbed input instead and pay for a
//! full second pass.

mod generate;
mod ledger;
mod sampling;

pub use generate::{generate_baseline, generate_sid, GenerationResult, LogitSummary, LogitTrace, StepDiagnostics};
pub use ledger::{cost_summary, CostLedger, CostReport};
pub use sampling::{
    additive_combine, contrastive_combine, greedy, masked_distribution, plausibility_support, sample, SamplerKind,
    SamplerSpec,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ct2s::{Ct2sError, KeepSpec, RefreshPeriod, SelectionMode};
use crate::model::{ModelConfig, ModelError};
use crate::numeric::NumericError;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("logit vectors differ in length: expert {expert}, other {other}")]
    LengthMismatch { expert: usize, other: usize },
    #[error("sampling support is empty")]
    EmptySupport,
    #[error("support index {index} outside vocabulary of {vocab}")]
    SupportIndex { index: usize, vocab: usize },
    #[error("non-finite logit")]
    NonFiniteLogits,
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("expert pass returned no attention row at the capture layer")]
    MissingCapture,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] Ct2sError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Contrastive,
    Additive,
    Off,
}

/// How the baseline amateur input is degraded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DisturbKind {
    None,
    /// One additive draw of `N(0, sigma²)` on every projected vision entry.
    GaussianVision { sigma: f32 },
    /// Ids placed in front of the instruction.
    NegativePrefix { prefix_ids: Vec<u32> },
    /// Every vision position removed.
    AblateVision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub alpha: f32,
    pub beta: f32,
    /// 1-based layer whose attention row drives selection; the amateur shares
    /// layers up to and including it.
    pub capture_layer: usize,
    pub keep: KeepSpec,
    pub selection_mode: SelectionMode,
    pub combine_mode: CombineMode,
    pub refresh_period: RefreshPeriod,
    pub sampler: SamplerSpec,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub plausibility: bool,
    /// Generation stops after emitting this id.
    #[serde(default)]
    pub eos_token: Option<u32>,
    /// Keep full logit vectors in the per-step diagnostics.
    #[serde(default)]
    pub trace_logits: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            capture_layer: 3,
            keep: KeepSpec::Ratio(0.1),
            selection_mode: SelectionMode::Least,
            combine_mode: CombineMode::Contrastive,
            refresh_period: RefreshPeriod::Every(1),
            sampler: SamplerSpec::greedy(),
            max_new_tokens: 64,
            seed: 0,
            plausibility: true,
            eos_token: None,
            trace_logits: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), DecoderError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DecoderError::InvalidConfig(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(DecoderError::InvalidConfig(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.capture_layer == 0 || self.capture_layer > model.n_layers {
            return Err(DecoderError::InvalidConfig(format!(
                "capture_layer {} outside 1..={}",
                self.capture_layer, model.n_layers
            )));
        }
        match self.keep {
            KeepSpec::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                return Err(DecoderError::InvalidConfig(format!("keep ratio {r} outside (0, 1]")))
            }
            KeepSpec::Count(0) => return Err(DecoderError::InvalidConfig("keep count must be at least 1".into())),
            _ => {}
        }
        if let Some(e) = self.eos_token {
            if e as usize >= model.vocab_size {
                return Err(DecoderError::InvalidConfig(format!("eos_token {e} outside vocabulary")));
            }
        }
        self.sampler.validate()
    }
}
