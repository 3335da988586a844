//! Compute accounting in token-layer passes.
//!
//! Two independent tallies are kept per branch: what the model reports it
//! actually computed, and what the decoder predicts from its own step records
//! (tokens pushed times layers run). They must agree exactly.

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, PassCost};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub expert: PassCost,
    pub amateur: PassCost,
    pub predicted_expert_passes: u64,
    pub predicted_amateur_passes: u64,
    /// Tokens the expert pushed through its layers.
    pub expert_tokens: u64,
    /// Tokens the amateur pushed through its own (unshared) layers.
    pub amateur_tokens: u64,
    /// Layers the amateur runs per token: `L - i` when sharing, `L` for a
    /// full second pass, 0 when there is no amateur.
    pub amateur_layers: usize,
}

impl CostLedger {
    pub(crate) fn expert_step(&mut self, measured: PassCost, tokens: usize, layers: usize) {
        self.expert += measured;
        self.expert_tokens += tokens as u64;
        self.predicted_expert_passes += (tokens * layers) as u64;
    }

    pub(crate) fn amateur_step(&mut self, measured: PassCost, tokens: usize, layers: usize) {
        self.amateur += measured;
        self.amateur_tokens += tokens as u64;
        self.amateur_layers = layers;
        self.predicted_amateur_passes += (tokens * layers) as u64;
    }

    pub fn total_passes(&self) -> u64 {
        self.expert.token_layer_passes + self.amateur.token_layer_passes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub expert_passes: u64,
    pub amateur_passes: u64,
    pub total_passes: u64,
    pub expert_macs: u64,
    pub amateur_macs: u64,
    /// Measured amateur / expert passes.
    pub ratio: f64,
    /// `(amateur_layers / L) * (amateur_tokens / expert_tokens)`.
    pub analytic_ratio: f64,
    /// Measured counts equal the step-record predictions.
    pub consistent: bool,
}

pub fn cost_summary(ledger: &CostLedger, model: &ModelConfig) -> CostReport {
    let e = ledger.expert.token_layer_passes;
    let a = ledger.amateur.token_layer_passes;
    let ratio = if e == 0 { 0.0 } else { a as f64 / e as f64 };
    let analytic_ratio = if ledger.expert_tokens == 0 {
        0.0
    } else {
        (ledger.amateur_layers as f64 / model.n_layers as f64)
            * (ledger.amateur_tokens as f64 / ledger.expert_tokens as f64)
    };
    CostReport {
        expert_passes: e,
        amateur_passes: a,
        total_passes: e + a,
        expert_macs: ledger.expert.macs,
        amateur_macs: ledger.amateur.macs,
        ratio,
        analytic_ratio,
        consistent: e == ledger.predicted_expert_passes && a == ledger.predicted_amateur_passes,
    }
}
