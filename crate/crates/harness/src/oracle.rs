//! A hand-wired model whose behaviour on grid scenes is known in closed form.
//!
//! The residual stream is a set of named features. The layers below the top
//! only attend (their value maps are zero), so every capture layer sees the
//! same steering pattern: a query for class `X` looks at `X`'s cells. The top
//! layer has five heads that read out evidence:
//!
//! * head A: mass on cells matching the queried class (`M_EV`)
//! * head B: mass on occupied cells (`O_EV`)
//! * head C: mean class one-hot over occupied cells (`CLS_EV`)
//! * head D: which classes were already emitted (`MENTION`)
//! * head E: question mode (+1) or describe mode (-1) (`MODE`)
//!
//! The unembedding adds a per-class prior on top of that evidence. With every
//! vision position removed, all evidence features vanish and the logits are
//! the prior head alone.

use serde::{Deserialize, Serialize};
use sid_core::ct2s::score_vision;
use sid_core::model::{LayerWeights, Model, ModelConfig, ModelError, ModelWeights, NormKind, TokenSequence};
use sid_core::numeric::Matrix;
use thiserror::Error;

use crate::scenario::{Scenario, ScenarioSet};

pub const YES: u32 = 0;
pub const NO: u32 = 1;
pub const EOS: u32 = 2;
pub const MARK: u32 = 3;
pub const DESC: u32 = 4;
pub const CONFUSED: u32 = 5;
const FIRST_CLASS: u32 = 6;

pub fn class_token(c: usize) -> u32 {
    FIRST_CLASS + c as u32
}

/// Class id of a vocabulary token, if it is one.
pub fn token_class(t: u32, n_classes: usize) -> Option<usize> {
    (t >= FIRST_CLASS && ((t - FIRST_CLASS) as usize) < n_classes).then(|| (t - FIRST_CLASS) as usize)
}

const HEADS: usize = 5;
const D_HEAD: usize = 16;
// Readout-layer keys. Capture layers use the configurable ones instead.
const MATCH_KEY: f32 = 400.0;
const ATTN_SINK: f32 = 200.0;
const CONFUSION_KEY: f32 = 500.0;
const TEXT_KEY: f32 = 300.0;
const BLOCKED: f32 = -1000.0;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle needs {needed} but the config has {got} ({what})")]
    Incompatible { what: &'static str, needed: usize, got: usize },
    #[error("{0} classes exceed the oracle's limit of {max}", max = D_HEAD - 1)]
    TooManyClasses(usize),
    #[error("steering gain leaves an attention leak bound of {epsilon:e}, above 0.1")]
    GainTooSmall { epsilon: f64 },
    #[error("concentration check failed: {image_id} class {class} layer {layer} has mass {mass}")]
    Concentration {
        image_id: String,
        class: usize,
        layer: usize,
        mass: f32,
    },
    #[error("vision-ablated logits differ from the prior head for class {class} at token {token}")]
    PriorMismatch { class: usize, token: usize },
    #[error("zero-prior oracle answered {image_id}/{class} wrongly under {strategy}")]
    ZeroPrior {
        image_id: String,
        class: usize,
        strategy: String,
    },
    #[error("oracle needs at least one probe scene")]
    NoProbes,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("probe decoding failed: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub n_layers: usize,
    /// Key weight on a matching class one-hot: the steering gain `g`.
    pub steering_gain: f32,
    /// Key weight on the occupied flag.
    pub object_key: f32,
    /// Key weight on co-occurring classes.
    pub cooccurrence_key: f32,
    /// Key weight on the instruction marker, where attention parks when
    /// nothing matches.
    pub sink_key: f32,
    /// YES logit per unit of matching-cell mass.
    pub grounding_gain: f32,
    /// YES logit removed per unit of occupied-cell mass.
    pub scan_penalty: f32,
    /// Class logit per unit of that class's share of the occupied cells.
    pub describe_gain: f32,
    pub describe_penalty: f32,
    pub eos_bias: f32,
    /// Logit removed from a class that was already emitted.
    pub mention_penalty: f32,
    /// Separation between question-mode and describe-mode tokens.
    pub mode_margin: f32,
    /// Question prior of class `c`:
    /// `scale * (pop_w * pop_c / max pop + cooc_w * deg01_c + offset)`, where
    /// `deg01` is the co-occurrence degree min-max scaled to `[0, 1]`.
    pub prior_scale: f64,
    pub prior_popularity: f64,
    pub prior_cooccurrence: f64,
    pub prior_offset: f64,
    /// Added to the prior of a class token while describing.
    pub describe_prior_shift: f64,
    pub max_seq: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            n_layers: 6,
            steering_gain: 40.0,
            object_key: 30.0,
            cooccurrence_key: 5.0,
            sink_key: 15.0,
            grounding_gain: 16.0,
            scan_penalty: 4.0,
            describe_gain: 24.0,
            describe_penalty: 2.0,
            eos_bias: 1.0,
            mention_penalty: 1000.0,
            mode_margin: 50.0,
            prior_scale: 1.0,
            prior_popularity: 2.0,
            prior_cooccurrence: 6.0,
            prior_offset: 1.0,
            describe_prior_shift: -1.0,
            max_seq: 96,
        }
    }
}

/// Everything the weights are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub params: OracleParams,
    pub n_classes: usize,
    pub n_cells: usize,
    pub cooccurrence: Vec<Vec<f64>>,
    /// Added to YES when asked about class `c`. Multiples of 1/64.
    pub prior: Vec<f64>,
    /// Bias of class `c`'s own token while describing.
    pub describe_prior: Vec<f64>,
}

fn quantize(x: f64) -> f64 {
    (x * 64.0).round() / 64.0
}

impl OracleSpec {
    pub fn from_scenarios(set: &ScenarioSet, params: OracleParams) -> Self {
        let freq = set.spec.frequencies();
        let max_f = freq.iter().copied().fold(0.0, f64::max);
        let deg: Vec<f64> = set.cooccurrence.iter().map(|r| r.iter().sum()).collect();
        let max_d = deg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_d = deg.iter().copied().fold(f64::INFINITY, f64::min);
        let prior: Vec<f64> = (0..set.spec.n_classes)
            .map(|c| {
                let p = if max_f > 0.0 { freq[c] / max_f } else { 0.0 };
                let d = if max_d > min_d { (deg[c] - min_d) / (max_d - min_d) } else { 0.0 };
                quantize(
                    params.prior_scale
                        * (params.prior_popularity * p + params.prior_cooccurrence * d + params.prior_offset),
                )
            })
            .collect();
        let describe_prior = prior
            .iter()
            .map(|r| quantize(r + params.prior_scale * params.describe_prior_shift))
            .collect();
        Self {
            n_classes: set.spec.n_classes,
            describe_prior,
            n_cells: set.spec.cells(),
            cooccurrence: set.cooccurrence.clone(),
            prior,
            params,
        }
    }

    /// Same wiring with the prior head switched off.
    pub fn zero_prior(&self) -> Self {
        Self {
            prior: vec![0.0; self.n_classes],
            describe_prior: vec![0.0; self.n_classes],
            ..self.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.params.n_layers,
            n_heads: HEADS,
            d_model: HEADS * D_HEAD,
            d_head: D_HEAD,
            d_ff: 1,
            vocab_size: FIRST_CLASS as usize + self.n_classes,
            d_vision: self.n_classes + 2 + self.n_cells,
            max_seq: self.params.max_seq,
            seed: 0,
            norm: NormKind::Identity,
        }
    }

    /// Upper bound on the attention a capture-layer query for a present class
    /// can leak to `others` non-matching positions.
    pub fn leak_bound(&self, others: usize) -> f64 {
        let p = &self.params;
        let rival = (p.object_key + p.cooccurrence_key).max(p.sink_key) as f64;
        let gap = (p.steering_gain + p.object_key) as f64 - rival;
        others as f64 * (-gap).exp()
    }
}

/// Residual feature indices.
struct Layout {
    c: usize,
}

impl Layout {
    const ONE: usize = 0;
    const VIS: usize = 1;
    const OBJ: usize = 2;
    const MARK: usize = 3;
    const DESC: usize = 4;
    const CONF: usize = 5;
    fn cls(&self, k: usize) -> usize {
        6 + k
    }
    fn qry(&self, k: usize) -> usize {
        6 + self.c + k
    }
    fn m_ev(&self) -> usize {
        6 + 2 * self.c
    }
    fn o_ev(&self) -> usize {
        7 + 2 * self.c
    }
    fn mode(&self) -> usize {
        8 + 2 * self.c
    }
    fn cls_ev(&self, k: usize) -> usize {
        9 + 2 * self.c + k
    }
    fn mention(&self, k: usize) -> usize {
        9 + 3 * self.c + k
    }
    fn used(&self) -> usize {
        9 + 4 * self.c
    }
}

fn check_config(spec: &OracleSpec, config: &ModelConfig) -> Result<(), OracleError> {
    if spec.n_classes + 1 > D_HEAD {
        return Err(OracleError::TooManyClasses(spec.n_classes));
    }
    let want = spec.model_config();
    let checks = [
        ("heads", HEADS, config.n_heads, config.n_heads >= HEADS),
        ("d_head", D_HEAD, config.d_head, config.d_head == D_HEAD),
        ("d_model", want.d_model, config.d_model, config.d_model >= Layout { c: spec.n_classes }.used()),
        ("vocab", want.vocab_size, config.vocab_size, config.vocab_size >= want.vocab_size),
        ("d_vision", want.d_vision, config.d_vision, config.d_vision == want.d_vision),
        ("layers", 2, config.n_layers, config.n_layers >= 2),
        ("identity norm", 1, 0, config.norm == NormKind::Identity),
    ];
    for (what, needed, got, ok) in checks {
        if !ok {
            return Err(OracleError::Incompatible { what, needed, got });
        }
    }
    Ok(())
}

fn weights(spec: &OracleSpec, config: &ModelConfig) -> ModelWeights {
    let p = &spec.params;
    let lay = Layout { c: spec.n_classes };
    let c = spec.n_classes;
    let q_gain = (D_HEAD as f32).sqrt();
    let mut w = ModelWeights::zeros(config);

    for k in 0..c {
        w.token_embedding.set(class_token(k) as usize, lay.qry(k), 1.0);
        w.vision_projection.set(k, lay.cls(k), 1.0);
    }
    w.token_embedding.set(MARK as usize, Layout::MARK, 1.0);
    w.token_embedding.set(DESC as usize, Layout::DESC, 1.0);
    w.token_embedding.set(CONFUSED as usize, Layout::CONF, 1.0);
    w.vision_projection.set(c, Layout::OBJ, 1.0);
    w.vision_projection.set(c + 1, Layout::VIS, 1.0);
    // Cell identity goes to spare residual width when there is any; nothing
    // reads it.
    for j in 0..spec.n_cells {
        let dim = lay.used() + j;
        if dim < config.d_model {
            w.vision_projection.set(c + 2 + j, dim, 1.0);
        }
    }
    for r in 0..config.max_seq {
        w.position_embedding.set(r, Layout::ONE, 1.0);
    }

    // Query: class dims 0..c carry the queried class, dim c carries a constant.
    let steer_query = |m: &mut Matrix, lo: usize| {
        for k in 0..c {
            m.set(lay.qry(k), lo + k, q_gain);
        }
        m.set(Layout::ONE, lo + c, q_gain);
    };
    let cooc_key = |m: &mut Matrix, lo: usize, gain: f32| {
        for j in 0..c {
            for k in 0..c {
                let v = p.cooccurrence_key * spec.cooccurrence[j][k] as f32 + if j == k { gain } else { 0.0 };
                m.set(lay.cls(k), lo + j, v);
            }
        }
    };

    for l in 0..config.n_layers - 1 {
        let lw = &mut w.layers[l];
        for h in 0..config.n_heads {
            let lo = h * D_HEAD;
            steer_query(&mut lw.wq, lo);
            cooc_key(&mut lw.wk, lo, p.steering_gain);
            lw.wk.set(Layout::OBJ, lo + c, p.object_key);
            lw.wk.set(Layout::MARK, lo + c, p.sink_key);
            lw.wk.set(Layout::DESC, lo + c, p.sink_key);
        }
    }

    let top: &mut LayerWeights = w.layers.last_mut().expect("at least two layers");
    // A: matching-cell mass.
    steer_query(&mut top.wq, 0);
    for k in 0..c {
        top.wk.set(lay.cls(k), k, MATCH_KEY);
    }
    for (f, v) in [(Layout::MARK, ATTN_SINK), (Layout::DESC, ATTN_SINK), (Layout::CONF, CONFUSION_KEY)] {
        top.wk.set(f, c, v);
    }
    top.wv.set(Layout::OBJ, 0, 1.0);
    top.wo.set(0, lay.m_ev(), 1.0);
    // B: occupied-cell mass.
    let lo = D_HEAD;
    top.wq.set(Layout::ONE, lo, q_gain);
    top.wk.set(Layout::OBJ, lo, TEXT_KEY);
    top.wk.set(Layout::MARK, lo, TEXT_KEY / 2.0);
    top.wk.set(Layout::DESC, lo, TEXT_KEY / 2.0);
    top.wk.set(Layout::CONF, lo, CONFUSION_KEY);
    top.wv.set(Layout::OBJ, lo, 1.0);
    top.wo.set(lo, lay.o_ev(), 1.0);
    // C: class content of the occupied cells.
    let lo = 2 * D_HEAD;
    top.wq.set(Layout::ONE, lo, q_gain);
    top.wk.set(Layout::OBJ, lo, TEXT_KEY);
    top.wk.set(Layout::MARK, lo, TEXT_KEY / 2.0);
    top.wk.set(Layout::DESC, lo, TEXT_KEY / 2.0);
    top.wk.set(Layout::CONF, lo, CONFUSION_KEY);
    for k in 0..c {
        top.wv.set(lay.cls(k), lo + k, 1.0);
        top.wo.set(lo + k, lay.cls_ev(k), 1.0);
    }
    // D: emitted classes. Class tokens key at 0, the describe marker at -1,
    // everything else far below.
    let lo = 3 * D_HEAD;
    top.wq.set(Layout::ONE, lo, q_gain);
    top.wk.set(Layout::ONE, lo, -TEXT_KEY);
    top.wk.set(Layout::DESC, lo, TEXT_KEY - 1.0);
    for k in 0..c {
        top.wk.set(lay.qry(k), lo, TEXT_KEY);
        top.wv.set(lay.qry(k), lo + k, 1.0);
        top.wo.set(lo + k, lay.mention(k), 1.0);
    }
    // E: mode.
    let lo = 4 * D_HEAD;
    top.wq.set(Layout::ONE, lo, q_gain);
    top.wk.set(Layout::MARK, lo, ATTN_SINK);
    top.wk.set(Layout::DESC, lo, ATTN_SINK);
    top.wv.set(Layout::MARK, lo, 1.0);
    top.wv.set(Layout::DESC, lo, -1.0);
    top.wo.set(lo, lay.mode(), 1.0);

    let u = &mut w.unembedding;
    let yes = YES as usize;
    u.set(lay.mode(), yes, p.mode_margin);
    u.set(lay.m_ev(), yes, p.grounding_gain);
    u.set(lay.o_ev(), yes, -p.scan_penalty);
    for k in 0..c {
        u.set(lay.qry(k), yes, spec.prior[k] as f32);
    }
    u.set(lay.mode(), NO as usize, p.mode_margin);
    for k in 0..c {
        let t = class_token(k) as usize;
        u.set(lay.mode(), t, -p.mode_margin);
        u.set(lay.cls_ev(k), t, p.describe_gain);
        u.set(lay.o_ev(), t, -p.describe_penalty);
        u.set(lay.mention(k), t, -p.mention_penalty);
        w.unembedding_bias[t] = spec.describe_prior[k] as f32;
    }
    u.set(lay.mode(), EOS as usize, -p.mode_margin);
    w.unembedding_bias[EOS as usize] = p.eos_bias;
    for t in [MARK, DESC, CONFUSED] {
        w.unembedding_bias[t as usize] = BLOCKED;
    }
    for t in FIRST_CLASS as usize + c..config.vocab_size {
        w.unembedding_bias[t] = BLOCKED;
    }
    w
}

/// Logits of the prior head alone for a text-only context: the model's
/// output once every vision position is gone. Computed in f64 straight from
/// the spec, without the model.
pub fn prior_head_logits(spec: &OracleSpec, vocab_size: usize, text: &[u32]) -> Vec<f64> {
    let p = &spec.params;
    let c = spec.n_classes;
    let last = *text.last().expect("non-empty text");
    // Mode: the latest marker wins; both key equally, so split by count.
    let (marks, descs) = text.iter().fold((0.0, 0.0), |(m, d), &t| {
        (m + (t == MARK) as u8 as f64, d + (t == DESC) as u8 as f64)
    });
    let mode = if marks + descs > 0.0 { (marks - descs) / (marks + descs) } else { 0.0 };
    // Mention head: keys 0 for class tokens, -1 for DESC, -300 otherwise.
    let key = |t: u32| -> f64 {
        if token_class(t, c).is_some() {
            0.0
        } else if t == DESC {
            -1.0
        } else {
            -(TEXT_KEY as f64)
        }
    };
    let top = text.iter().map(|&t| key(t)).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = text.iter().map(|&t| (key(t) - top).exp()).sum();
    let mut mention = vec![0.0; c];
    for &t in text {
        if let Some(k) = token_class(t, c) {
            mention[k] += (key(t) - top).exp() / z;
        }
    }
    let query = token_class(last, c);
    let mut out = vec![BLOCKED as f64; vocab_size];
    let margin = p.mode_margin as f64;
    out[YES as usize] = margin * mode + query.map_or(0.0, |k| spec.prior[k]);
    out[NO as usize] = margin * mode;
    out[EOS as usize] = -margin * mode + p.eos_bias as f64;
    for k in 0..c {
        out[class_token(k) as usize] = -margin * mode - p.mention_penalty as f64 * mention[k] + spec.describe_prior[k];
    }
    out
}

/// Results of the build-time checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub probes: usize,
    pub queries: usize,
    /// Smallest matching-cell mass seen at any capture layer below the top.
    pub min_mass: f32,
    pub leak_bound: f64,
    pub prior_exact: bool,
}

#[derive(Debug, Clone)]
pub struct Oracle {
    pub model: Model,
    pub spec: OracleSpec,
    pub certificate: Certificate,
}

/// Instruction for an existence question about class `c`.
pub fn question(c: usize) -> [u32; 2] {
    [MARK, class_token(c)]
}

pub const DESCRIBE: [u32; 1] = [DESC];

pub fn sequence(model: &Model, scene: &Scenario, n_classes: usize, instruction: &[u32]) -> Result<TokenSequence, ModelError> {
    model.build_sequence(&scene.vision_features(n_classes), instruction)
}

/// Wires the weights, then checks on `probes` that questions about present
/// classes concentrate at least 0.9 of every capture layer's attention on the
/// matching cells, and that vision-ablated logits equal the prior head
/// exactly. Any failure rejects the model.
pub fn build_oracle(spec: &OracleSpec, config: &ModelConfig, probes: &[Scenario]) -> Result<Oracle, OracleError> {
    check_config(spec, config)?;
    if probes.is_empty() {
        return Err(OracleError::NoProbes);
    }
    let model = Model::from_weights(config.clone(), weights(spec, config))?;
    let c = spec.n_classes;
    let leak_bound = spec.leak_bound(spec.n_cells + 2);
    if leak_bound > 0.1 {
        return Err(OracleError::GainTooSmall { epsilon: leak_bound });
    }

    let mut min_mass = f32::INFINITY;
    let mut queries = 0;
    for scene in probes {
        for class in scene.classes() {
            let seq = sequence(&model, scene, c, &question(class))?;
            let cells = scene.cells_of(class);
            queries += 1;
            for layer in 1..config.n_layers {
                let (out, _) = model.prefill(&seq, layer)?;
                let row = out.captured.ok_or(ModelError::CaptureLayer {
                    layer,
                    n_layers: config.n_layers,
                })?;
                let scores = score_vision(&row, seq.n_vision(), 0).map_err(|e| OracleError::Decode(e.to_string()))?;
                let mass: f32 = cells.iter().map(|&j| scores.scores[j]).sum();
                min_mass = min_mass.min(mass);
                if mass < 0.9 {
                    return Err(OracleError::Concentration {
                        image_id: scene.image_id.clone(),
                        class,
                        layer,
                        mass,
                    });
                }
            }
        }
    }

    let scene = &probes[0];
    for class in 0..c {
        let q = question(class);
        let seq = sequence(&model, scene, c, &q)?;
        let (out, _) = model.prefill_without_vision(&seq, 1)?;
        let want = prior_head_logits(spec, config.vocab_size, &q);
        for (token, (&got, &w)) in out.logits.iter().zip(&want).enumerate() {
            if got != w as f32 {
                return Err(OracleError::PriorMismatch { class, token });
            }
        }
    }

    Ok(Oracle {
        model,
        certificate: Certificate {
            probes: probes.len(),
            queries,
            min_mass: if queries == 0 { 1.0 } else { min_mass },
            leak_bound,
            prior_exact: true,
        },
        spec: spec.clone(),
    })
}
