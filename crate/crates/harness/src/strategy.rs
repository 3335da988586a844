//! Named decoding strategies and how each maps onto the decoder.

use serde::{Deserialize, Serialize};
use sid_core::ct2s::SelectionMode;
use sid_core::decoder::{generate_baseline, generate_sid, CombineMode, DecodeConfig, DecoderError, DisturbKind, GenerationResult};
use sid_core::model::{Model, TokenSequence};

use crate::oracle::CONFUSED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BaselineNone,
    Vcd,
    Icd,
    Vig,
    SidContrastive,
    SidAdditive,
    SidRandom,
    SidMost,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::BaselineNone,
        Strategy::Vcd,
        Strategy::Icd,
        Strategy::Vig,
        Strategy::SidContrastive,
        Strategy::SidAdditive,
        Strategy::SidRandom,
        Strategy::SidMost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BaselineNone => "baseline_none",
            Strategy::Vcd => "vcd",
            Strategy::Icd => "icd",
            Strategy::Vig => "vig",
            Strategy::SidContrastive => "sid_contrastive",
            Strategy::SidAdditive => "sid_additive",
            Strategy::SidRandom => "sid_random",
            Strategy::SidMost => "sid_most",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        let s = s.replace('-', "_");
        Strategy::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn is_sid(self) -> bool {
        matches!(
            self,
            Strategy::SidContrastive | Strategy::SidAdditive | Strategy::SidRandom | Strategy::SidMost
        )
    }

    /// The effective decode config: selection and combine fields are fixed by
    /// the strategy, everything else comes from `base`.
    pub fn decode_config(self, base: &DecodeConfig) -> DecodeConfig {
        let mut cfg = base.clone();
        let (mode, combine) = match self {
            Strategy::BaselineNone => (base.selection_mode, CombineMode::Off),
            Strategy::SidContrastive => (SelectionMode::Least, CombineMode::Contrastive),
            // The additive variant enhances with the most-attended tokens.
            Strategy::SidAdditive => (SelectionMode::Most, CombineMode::Additive),
            Strategy::SidRandom => (SelectionMode::Random, CombineMode::Contrastive),
            Strategy::SidMost => (SelectionMode::Most, CombineMode::Contrastive),
            Strategy::Vcd | Strategy::Icd | Strategy::Vig => (base.selection_mode, CombineMode::Contrastive),
        };
        cfg.selection_mode = mode;
        cfg.combine_mode = combine;
        cfg
    }

    pub fn disturbance(self, vcd_sigma: f32) -> DisturbKind {
        match self {
            Strategy::Vcd => DisturbKind::GaussianVision { sigma: vcd_sigma },
            Strategy::Icd => DisturbKind::NegativePrefix {
                prefix_ids: vec![CONFUSED],
            },
            Strategy::Vig => DisturbKind::AblateVision,
            _ => DisturbKind::None,
        }
    }

    pub fn run(
        self,
        model: &Model,
        seq: &TokenSequence,
        base: &DecodeConfig,
        vcd_sigma: f32,
    ) -> Result<GenerationResult, DecoderError> {
        let cfg = self.decode_config(base);
        if self.is_sid() {
            generate_sid(model, seq, &cfg)
        } else {
            generate_baseline(model, seq, &self.disturbance(vcd_sigma), &cfg)
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
