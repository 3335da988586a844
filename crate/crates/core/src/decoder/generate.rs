//! Generation loops for the self-introspective strategy and the baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ledger::CostLedger;
use super::sampling::{additive_combine, contrastive_combine, plausibility_support, sample};
use super::{CombineMode, DecodeConfig, DecoderError, DisturbKind};
use crate::ct2s::{refresh_policy, score_vision, select, ScoreVector, SelectionMask};
use crate::model::{KvCache, Model, StepOutput, TokenSequence};
use crate::numeric::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitSummary {
    pub argmax: u32,
    pub max: f32,
    pub mean: f32,
}

impl LogitSummary {
    fn of(logits: &[f32]) -> Self {
        let mut argmax = 0;
        for (j, &l) in logits.iter().enumerate() {
            if l > logits[argmax] {
                argmax = j;
            }
        }
        Self {
            argmax: argmax as u32,
            max: logits[argmax],
            mean: logits.iter().sum::<f32>() / logits.len() as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTrace {
    pub expert: Vec<f32>,
    pub amateur: Option<Vec<f32>>,
    pub combined: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub token: u32,
    pub expert: LogitSummary,
    pub amateur: Option<LogitSummary>,
    pub combined: LogitSummary,
    pub support_size: usize,
    /// Present on steps where a fresh selection was made.
    pub scores: Option<ScoreVector>,
    pub selection: Option<SelectionMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<LogitTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub generated: Vec<u32>,
    pub steps: Vec<StepDiagnostics>,
    pub ledger: CostLedger,
    pub stopped_on_eos: bool,
}

impl GenerationResult {
    fn empty() -> Self {
        Self {
            generated: Vec::new(),
            steps: Vec::new(),
            ledger: CostLedger::default(),
            stopped_on_eos: false,
        }
    }
}

/// Per-session token chooser. Owns the sampling stream, which is kept apart
/// from the selection and noise streams so that changing the amateur never
/// shifts the draws.
struct Chooser<'a> {
    cfg: &'a DecodeConfig,
    rng: ChaCha8Rng,
    result: GenerationResult,
}

impl<'a> Chooser<'a> {
    fn new(cfg: &'a DecodeConfig) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            result: GenerationResult::empty(),
        }
    }

    /// Combines, cuts, samples and records one step. Returns the token and
    /// whether generation should stop after it.
    fn step(
        &mut self,
        expert: &[f32],
        amateur: Option<&[f32]>,
        scores: Option<ScoreVector>,
        selection: Option<SelectionMask>,
    ) -> Result<(u32, bool), DecoderError> {
        let cfg = self.cfg;
        let combined = match (amateur, cfg.combine_mode) {
            (Some(a), CombineMode::Contrastive) => contrastive_combine(expert, a, cfg.alpha)?,
            (Some(a), CombineMode::Additive) => additive_combine(expert, a, cfg.alpha)?,
            _ => expert.to_vec(),
        };
        let support = if amateur.is_some() && cfg.plausibility {
            plausibility_support(&softmax(expert)?, cfg.beta)
        } else {
            (0..expert.len()).collect()
        };
        let token = sample(&combined, &cfg.sampler, &support, &mut self.rng)?;
        let step = self.result.steps.len();
        self.result.steps.push(StepDiagnostics {
            step,
            token,
            expert: LogitSummary::of(expert),
            amateur: amateur.map(LogitSummary::of),
            combined: LogitSummary::of(&combined),
            support_size: support.len(),
            scores,
            selection,
            logits: cfg.trace_logits.then(|| LogitTrace {
                expert: expert.to_vec(),
                amateur: amateur.map(<[f32]>::to_vec),
                combined: combined.clone(),
            }),
        });
        self.result.generated.push(token);
        let eos = cfg.eos_token == Some(token);
        self.result.stopped_on_eos = eos;
        Ok((token, eos || self.result.generated.len() >= cfg.max_new_tokens))
    }
}

fn selection_seed(seed: u64, step: usize) -> u64 {
    // splitmix64 finalizer over (seed, step)
    let mut z = seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Self-introspective decoding. Each step the expert runs over the full
/// input; when the refresh policy fires, its capture-layer attention row is
/// scored and a vision subset is selected, and the amateur is rebuilt from
/// the expert's stored layer inputs above the capture layer. Between
/// refreshes the amateur advances incrementally on its own pruned cache.
pub fn generate_sid(model: &Model, seq: &TokenSequence, cfg: &DecodeConfig) -> Result<GenerationResult, DecoderError> {
    cfg.validate(model.config())?;
    if cfg.combine_mode == CombineMode::Off {
        return Err(DecoderError::InvalidConfig(
            "self-introspective decoding needs a contrastive or additive combine".into(),
        ));
    }
    if cfg.max_new_tokens == 0 {
        return Ok(GenerationResult::empty());
    }
    let n_layers = model.config().n_layers;
    let i = cfg.capture_layer;
    let n = seq.n_vision();
    let mut chooser = Chooser::new(cfg);

    let (mut expert_out, mut expert_cache) = model.prefill(seq, i)?;
    chooser.result.ledger.expert_step(expert_out.cost, seq.len(), n_layers);
    let mut amateur_cache: Option<KvCache> = None;

    for step in 0.. {
        let (amateur_logits, scores, selection) = match amateur_cache.as_mut() {
            Some(ac) if !refresh_policy(step, cfg.refresh_period) => {
                let out = model.decode_step_shared(ac, &expert_cache, i)?;
                chooser.result.ledger.amateur_step(out.cost, 1, n_layers - i);
                (out.logits, None, None)
            }
            _ => {
                let row = expert_out.captured.as_ref().ok_or(DecoderError::MissingCapture)?;
                let scores = score_vision(row, n, step)?;
                let mask = select(&scores, cfg.keep, cfg.selection_mode, selection_seed(cfg.seed, step))?;
                let (ac, out) = model.prune(&expert_cache, &mask.kept, i)?;
                let text = expert_cache.next_position() - n;
                chooser.result.ledger.amateur_step(out.cost, text + mask.kept.len(), n_layers - i);
                amateur_cache = Some(ac);
                (out.logits, Some(scores), Some(mask))
            }
        };
        let (token, stop) = chooser.step(&expert_out.logits, Some(&amateur_logits), scores, selection)?;
        if stop {
            break;
        }
        expert_out = model.decode_step(&mut expert_cache, token, i)?;
        chooser.result.ledger.expert_step(expert_out.cost, 1, n_layers);
    }
    Ok(chooser.result)
}

/// Plain decoding (`DisturbKind::None`) or a contrastive baseline whose
/// amateur is a full second pass over a disturbed copy of the input.
pub fn generate_baseline(
    model: &Model,
    seq: &TokenSequence,
    disturb: &DisturbKind,
    cfg: &DecodeConfig,
) -> Result<GenerationResult, DecoderError> {
    cfg.validate(model.config())?;
    let disturbed = match disturb {
        DisturbKind::None => None,
        _ if cfg.combine_mode == CombineMode::Off => {
            return Err(DecoderError::InvalidConfig("a disturbed baseline needs a combine mode".into()))
        }
        DisturbKind::GaussianVision { sigma } => {
            if !(*sigma >= 0.0 && sigma.is_finite()) {
                return Err(DecoderError::InvalidConfig(format!("noise sigma {sigma} must be >= 0")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            Some((seq.with_vision_noise(*sigma, &mut rng), false))
        }
        DisturbKind::NegativePrefix { prefix_ids } => Some((seq.with_instruction_prefix(prefix_ids), false)),
        DisturbKind::AblateVision => Some((seq.clone(), true)),
    };
    if cfg.max_new_tokens == 0 {
        return Ok(GenerationResult::empty());
    }
    let n_layers = model.config().n_layers;
    let i = cfg.capture_layer;
    let mut chooser = Chooser::new(cfg);

    let (mut expert_out, mut expert_cache) = model.prefill(seq, i)?;
    chooser.result.ledger.expert_step(expert_out.cost, seq.len(), n_layers);
    let mut amateur: Option<(StepOutput, KvCache)> = match disturbed {
        None => None,
        Some((aseq, ablate)) => {
            let (out, cache) = if ablate {
                model.prefill_without_vision(&aseq, i)?
            } else {
                model.prefill(&aseq, i)?
            };
            let tokens = if ablate { aseq.len() - aseq.n_vision() } else { aseq.len() };
            chooser.result.ledger.amateur_step(out.cost, tokens, n_layers);
            Some((out, cache))
        }
    };

    loop {
        let amateur_logits = amateur.as_ref().map(|(o, _)| o.logits.as_slice());
        let (token, stop) = chooser.step(&expert_out.logits, amateur_logits, None, None)?;
        if stop {
            break;
        }
        expert_out = model.decode_step(&mut expert_cache, token, i)?;
        chooser.result.ledger.expert_step(expert_out.cost, 1, n_layers);
        if let Some((out, cache)) = amateur.as_mut() {
            *out = model.decode_step(cache, token, i)?;
            chooser.result.ledger.amateur_step(out.cost, 1, n_layers);
        }
    }
    Ok(chooser.result)
}
