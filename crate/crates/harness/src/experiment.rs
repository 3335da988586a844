//! Experiment execution: scenes, a certified oracle, every (sweep point,
//! strategy) pair, and the files that record them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sid_core::decoder::{cost_summary, CostLedger, CostReport, DecodeConfig, GenerationResult, StepDiagnostics};
use sid_core::metrics::{
    chair, make_pope_items, pope_score, read_json, read_jsonl, write_json, Answer, CaptionRecord, ChairScore, PoolSet,
    PopeItem, PopeReport, PopeSetting, TextStats,
};
use sid_core::model::ModelConfig;
use thiserror::Error;

use crate::oracle::{self, build_oracle, class_token, Certificate, Oracle, OracleError, OracleParams, OracleSpec};
use crate::scenario::{class_name, gen_scenarios, Scenario, ScenarioError, ScenarioSet, ScenarioSpec};
use crate::strategy::Strategy;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("oracle rejected: {0}")]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Metrics(#[from] sid_core::metrics::MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Decode-config values to sweep. The cartesian product of the non-empty axes
/// is run; all axes empty means the base config alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    #[serde(default)]
    pub alpha: Vec<f32>,
    #[serde(default)]
    pub beta: Vec<f32>,
    #[serde(default)]
    pub capture_layer: Vec<usize>,
    #[serde(default)]
    pub keep_ratio: Vec<f32>,
}

/// Preset axes: layer by keep ratio, or one of the two contrast knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPreset {
    LayerRatio,
    Alpha,
    Beta,
}

impl SweepAxes {
    pub fn preset(p: SweepPreset, n_layers: usize) -> Self {
        match p {
            SweepPreset::LayerRatio => Self {
                capture_layer: vec![1, 3, 5, n_layers],
                keep_ratio: vec![0.1, 0.4, 1.0],
                ..Self::default()
            },
            SweepPreset::Alpha => Self {
                alpha: vec![0.1, 0.5, 1.0, 2.0],
                ..Self::default()
            },
            SweepPreset::Beta => Self {
                beta: vec![0.0, 0.1, 0.25, 0.5, 1.0],
                ..Self::default()
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty() && self.beta.is_empty() && self.capture_layer.is_empty() && self.keep_ratio.is_empty()
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().map(|x| Some(*x)).collect()
            }
        }
        let mut out = Vec::new();
        for &alpha in &axis(&self.alpha) {
            for &beta in &axis(&self.beta) {
                for &capture_layer in &axis(&self.capture_layer) {
                    for &keep_ratio in &axis(&self.keep_ratio) {
                        out.push(SweepPoint {
                            index: out.len(),
                            alpha,
                            beta,
                            capture_layer,
                            keep_ratio,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub alpha: Option<f32>,
    pub beta: Option<f32>,
    pub capture_layer: Option<usize>,
    pub keep_ratio: Option<f32>,
}

impl SweepPoint {
    pub fn apply(&self, base: &DecodeConfig) -> DecodeConfig {
        let mut c = base.clone();
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(b) = self.beta {
            c.beta = b;
        }
        if let Some(i) = self.capture_layer {
            c.capture_layer = i;
        }
        if let Some(r) = self.keep_ratio {
            c.keep = sid_core::ct2s::KeepSpec::Ratio(r);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub scenario_seed: u64,
    pub scenario_count: usize,
    pub oracle: OracleParams,
    /// Base decode config. Describe runs use it as is; existence questions
    /// override `max_new_tokens` to 1 and clear `eos_token`.
    pub decode: DecodeConfig,
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub sweep: SweepAxes,
    /// Questions per scene per negative-sampling setting.
    pub pope_per_setting: usize,
    pub pope_seed: u64,
    pub vcd_sigma: f32,
    pub describe: bool,
    /// Write per-step diagnostics.
    pub diagnostics: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            scenario_seed: 0,
            scenario_count: 500,
            oracle: OracleParams::default(),
            decode: DecodeConfig {
                eos_token: Some(oracle::EOS),
                ..DecodeConfig::default()
            },
            strategies: Strategy::ALL.to_vec(),
            sweep: SweepAxes::default(),
            pope_per_setting: 6,
            pope_seed: 0,
            vcd_sigma: 0.1,
            describe: true,
            diagnostics: true,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.strategies.is_empty() {
            return bad("strategy list is empty".into());
        }
        if self.scenario_count == 0 {
            return bad("scenario_count must be positive".into());
        }
        if !(self.vcd_sigma.is_finite() && self.vcd_sigma >= 0.0) {
            return bad(format!("vcd_sigma {} must be finite and >= 0", self.vcd_sigma));
        }
        let s = &self.sweep;
        if s.alpha.iter().chain(&s.beta).chain(&s.keep_ratio).any(|v| !v.is_finite()) {
            return bad("sweep values must be finite".into());
        }
        for p in s.points() {
            p.apply(&self.decode)
                .validate(model)
                .map_err(|e| ExperimentError::InvalidConfig(format!("sweep point {}: {e}", p.index)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Describe,
    Pope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub point: usize,
    pub strategy: Strategy,
    pub image_id: String,
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub setting: Option<PopeSetting>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub object: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<bool>,
    pub tokens: Vec<u32>,
    pub text: Vec<String>,
    pub stopped_on_eos: bool,
    pub ledger: CostLedger,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub point: usize,
    pub strategy: Strategy,
    pub image_id: String,
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub object: Option<String>,
    pub steps: Vec<StepDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRow {
    pub point: usize,
    pub strategy: Strategy,
    pub record: CaptionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeRow {
    pub point: usize,
    pub strategy: Strategy,
    pub item: PopeItem,
}

/// Metrics for one (sweep point, strategy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub point: usize,
    pub strategy: Strategy,
    pub pope: Option<PopeReport>,
    pub chair: Option<ChairScore>,
    pub text: Option<TextStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub point: SweepPoint,
    pub strategy: Strategy,
    /// The point's decode config before strategy overrides.
    pub decode: DecodeConfig,
    pub generations: usize,
    pub errors: usize,
    pub scores: ScoreRow,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub certificate: Certificate,
    pub rows: Vec<SummaryRow>,
}

pub const GENERATIONS: &str = "generations.jsonl";
pub const DIAGNOSTICS: &str = "diagnostics.jsonl";
pub const CAPTIONS: &str = "captions.jsonl";
pub const POPE: &str = "pope.jsonl";
pub const POOLS: &str = "pools.json";
pub const SCENARIOS: &str = "scenarios.json";
pub const SUMMARY: &str = "summary.json";

/// Scenes plus the oracle built and certified over them.
pub struct Prepared {
    pub set: ScenarioSet,
    pub pools: PoolSet,
    pub oracle: Oracle,
}

const PROBES: usize = 32;
const ZERO_PRIOR_PROBES: usize = 8;

/// Builds the scenes and the oracle, and runs every certification step. The
/// zero-prior twin must answer every probe question correctly under every
/// strategy at the base decode config.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let set = gen_scenarios(&config.scenario, config.scenario_seed, config.scenario_count)?;
    let spec = OracleSpec::from_scenarios(&set, config.oracle.clone());
    let probes = &set.scenarios[..set.scenarios.len().min(PROBES)];
    let oracle = build_oracle(&spec, &spec.model_config(), probes)?;
    config.validate(oracle.model.config())?;
    certify_zero_prior(&spec, probes, &config.decode, config.vcd_sigma)?;
    let pools = set.pool_set();
    Ok(Prepared { set, pools, oracle })
}

/// Brute force over strategies on the prior-free twin: every existence
/// question about the probe scenes must get the grounded answer.
pub fn certify_zero_prior(
    spec: &OracleSpec,
    probes: &[Scenario],
    decode: &DecodeConfig,
    vcd_sigma: f32,
) -> Result<(), OracleError> {
    let twin = spec.zero_prior();
    let oracle = build_oracle(&twin, &twin.model_config(), probes)?;
    let cfg = pope_config(decode);
    for scene in probes.iter().take(ZERO_PRIOR_PROBES) {
        let present = scene.classes();
        for class in 0..spec.n_classes {
            let seq = oracle::sequence(&oracle.model, scene, spec.n_classes, &oracle::question(class))?;
            for s in Strategy::ALL {
                let r = s
                    .run(&oracle.model, &seq, &cfg, vcd_sigma)
                    .map_err(|e| OracleError::Decode(e.to_string()))?;
                let want = if present.contains(&class) { oracle::YES } else { oracle::NO };
                if r.generated.first() != Some(&want) {
                    return Err(OracleError::ZeroPrior {
                        image_id: scene.image_id.clone(),
                        class,
                        strategy: s.name().into(),
                    });
                }
            }
        }
    }
    Ok(())
}

pub fn pope_config(base: &DecodeConfig) -> DecodeConfig {
    DecodeConfig {
        max_new_tokens: 1,
        eos_token: None,
        ..base.clone()
    }
}

pub fn answer_of(tokens: &[u32]) -> Option<Answer> {
    tokens.first().map(|&t| match t {
        oracle::YES => Answer::Yes,
        oracle::NO => Answer::No,
        _ => Answer::Abstain,
    })
}

/// Words of a generated token stream; class tokens become object names and
/// the caption is closed with a full stop.
pub fn token_words(tokens: &[u32], n_classes: usize) -> Vec<String> {
    let mut words: Vec<String> = tokens
        .iter()
        .filter(|&&t| t != oracle::EOS)
        .map(|&t| match oracle::token_class(t, n_classes) {
            Some(c) => class_name(c),
            None => match t {
                oracle::YES => "yes".into(),
                oracle::NO => "no".into(),
                _ => format!("<{t}>"),
            },
        })
        .collect();
    words.push(".".into());
    words
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-generation seed: distinct per scene and task, fixed across strategies
/// and sweep points.
fn generation_seed(base: u64, scene: usize, task: usize) -> u64 {
    splitmix(base ^ splitmix(((scene as u64) << 32) | task as u64))
}

/// Existence questions grouped by scene, in generation order.
pub fn pope_items_by_scene(
    pools: &PoolSet,
    per_setting: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<PopeItem>>, ExperimentError> {
    let mut by_scene: BTreeMap<String, Vec<PopeItem>> = BTreeMap::new();
    if per_setting == 0 {
        return Ok(by_scene);
    }
    for (k, setting) in PopeSetting::ALL.into_iter().enumerate() {
        let items = make_pope_items(pools, setting, per_setting * pools.pools.len(), seed.wrapping_add(k as u64))?;
        for it in items {
            by_scene.entry(it.image_id.clone()).or_default().push(it);
        }
    }
    Ok(by_scene)
}

struct SceneOutput {
    generations: Vec<GenerationRow>,
    diagnostics: Vec<DiagnosticsRow>,
}

#[allow(clippy::too_many_arguments)]
fn run_scene(
    oracle: &Oracle,
    scene_index: usize,
    scene: &Scenario,
    items: &[PopeItem],
    strategy: Strategy,
    point: usize,
    decode: &DecodeConfig,
    config: &ExperimentConfig,
) -> SceneOutput {
    let c = oracle.spec.n_classes;
    let mut out = SceneOutput {
        generations: Vec::new(),
        diagnostics: Vec::new(),
    };
    let emit = |task: Task,
                    item: Option<&PopeItem>,
                    result: Result<GenerationResult, String>,
                    out: &mut SceneOutput| {
        let (tokens, eos, ledger, steps, error) = match result {
            Ok(r) => (r.generated, r.stopped_on_eos, r.ledger, r.steps, None),
            Err(e) => (Vec::new(), false, CostLedger::default(), Vec::new(), Some(e)),
        };
        out.generations.push(GenerationRow {
            point,
            strategy,
            image_id: scene.image_id.clone(),
            task,
            setting: item.map(|i| i.setting),
            object: item.map(|i| i.object.clone()),
            label: item.map(|i| i.label),
            text: token_words(&tokens, c),
            tokens,
            stopped_on_eos: eos,
            ledger,
            error,
        });
        if config.diagnostics {
            out.diagnostics.push(DiagnosticsRow {
                point,
                strategy,
                image_id: scene.image_id.clone(),
                task,
                object: item.map(|i| i.object.clone()),
                steps,
            });
        }
    };
    let run = |instruction: &[u32], cfg: &DecodeConfig| -> Result<GenerationResult, String> {
        let seq = oracle::sequence(&oracle.model, scene, c, instruction).map_err(|e| e.to_string())?;
        strategy
            .run(&oracle.model, &seq, cfg, config.vcd_sigma)
            .map_err(|e| e.to_string())
    };
    if config.describe {
        let cfg = DecodeConfig {
            seed: generation_seed(decode.seed, scene_index, 0),
            ..decode.clone()
        };
        let r = run(&oracle::DESCRIBE, &cfg);
        emit(Task::Describe, None, r, &mut out);
    }
    let pope = pope_config(decode);
    for (j, item) in items.iter().enumerate() {
        let r = match (0..c).find(|&k| class_name(k) == item.object) {
            Some(class) => {
                let cfg = DecodeConfig {
                    seed: generation_seed(decode.seed, scene_index, j + 1),
                    ..pope.clone()
                };
                run(&[oracle::MARK, class_token(class)], &cfg)
            }
            None => Err(format!("unknown object {}", item.object)),
        };
        emit(Task::Pope, Some(item), r, &mut out);
    }
    out
}

/// Metrics of one (point, strategy) group.
pub fn score_group(
    point: usize,
    strategy: Strategy,
    captions: &[CaptionRecord],
    pope: &[PopeItem],
    pools: &PoolSet,
) -> Result<ScoreRow, ExperimentError> {
    Ok(ScoreRow {
        point,
        strategy,
        pope: if pope.is_empty() { None } else { Some(pope_score(pope)?) },
        chair: if captions.is_empty() { None } else { Some(chair(captions, pools)?) },
        text: if captions.is_empty() {
            None
        } else {
            Some(sid_core::metrics::text_stats(captions)?)
        },
    })
}

/// Scores every (point, strategy) group found in caption and question rows.
pub fn score_rows(captions: &[CaptionRow], pope: &[PopeRow], pools: &PoolSet) -> Result<Vec<ScoreRow>, ExperimentError> {
    let mut groups: BTreeMap<(usize, Strategy), (Vec<CaptionRecord>, Vec<PopeItem>)> = BTreeMap::new();
    for r in captions {
        groups.entry((r.point, r.strategy)).or_default().0.push(r.record.clone());
    }
    for r in pope {
        groups.entry((r.point, r.strategy)).or_default().1.push(r.item.clone());
    }
    groups
        .into_iter()
        .map(|((p, s), (c, q))| score_group(p, s, &c, &q, pools))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path).map(BufWriter::new).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, row: &T) -> Result<(), ExperimentError> {
    serde_json::to_writer(&mut *w, row)?;
    w.write_all(b"\n").map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Worker count from `SID_WORKERS`, defaulting to the available parallelism.
pub fn workers_from_env() -> usize {
    std::env::var("SID_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs the experiment and writes every output file. Scenes are spread over
/// `workers` threads; each output file has one writer, fed in a fixed order,
/// so the files do not depend on the worker count.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<Summary, ExperimentError> {
    let prep = prepare(config)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.clone(),
        source,
    })?;
    write_json(&dir.join(POOLS), &prep.pools)?;
    write_json(&dir.join(SCENARIOS), &prep.set)?;
    let items = pope_items_by_scene(&prep.pools, config.pope_per_setting, config.pope_seed)?;
    let objects: BTreeSet<String> = prep.pools.universe.iter().cloned().collect();
    let model_cfg = prep.oracle.model.config().clone();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;

    let paths = [GENERATIONS, DIAGNOSTICS, CAPTIONS, POPE].map(|f| dir.join(f));
    let mut gen_w = create(&paths[0])?;
    let mut diag_w = if config.diagnostics { Some(create(&paths[1])?) } else { None };
    let mut cap_w = create(&paths[2])?;
    let mut pope_w = create(&paths[3])?;

    let mut rows = Vec::new();
    for point in config.sweep.points() {
        let decode = point.apply(&config.decode);
        for &strategy in &config.strategies {
            let outputs: Vec<SceneOutput> = pool.install(|| {
                prep.set
                    .scenarios
                    .par_iter()
                    .enumerate()
                    .map(|(k, scene)| {
                        let its = items.get(&scene.image_id).map(Vec::as_slice).unwrap_or(&[]);
                        run_scene(&prep.oracle, k, scene, its, strategy, point.index, &decode, config)
                    })
                    .collect()
            });

            let mut ledger = CostLedger::default();
            let (mut captions, mut pope_items) = (Vec::new(), Vec::new());
            let (mut generations, mut errors) = (0, 0);
            for out in &outputs {
                for g in &out.generations {
                    write_line(&mut gen_w, &paths[0], g)?;
                    generations += 1;
                    errors += g.error.is_some() as usize;
                    ledger.expert += g.ledger.expert;
                    ledger.amateur += g.ledger.amateur;
                    ledger.predicted_expert_passes += g.ledger.predicted_expert_passes;
                    ledger.predicted_amateur_passes += g.ledger.predicted_amateur_passes;
                    ledger.expert_tokens += g.ledger.expert_tokens;
                    ledger.amateur_tokens += g.ledger.amateur_tokens;
                    ledger.amateur_layers = ledger.amateur_layers.max(g.ledger.amateur_layers);
                    match g.task {
                        Task::Describe if g.error.is_none() => {
                            let record = CaptionRecord::from_caption(g.image_id.clone(), g.text.clone(), &objects);
                            let row = CaptionRow {
                                point: point.index,
                                strategy,
                                record,
                            };
                            write_line(&mut cap_w, &paths[2], &row)?;
                            captions.push(row.record);
                        }
                        Task::Describe => {}
                        Task::Pope => {
                            let item = PopeItem {
                                image_id: g.image_id.clone(),
                                object: g.object.clone().unwrap_or_default(),
                                label: g.label.unwrap_or(false),
                                answer: answer_of(&g.tokens),
                                setting: g.setting.unwrap_or(PopeSetting::Random),
                            };
                            let row = PopeRow {
                                point: point.index,
                                strategy,
                                item,
                            };
                            write_line(&mut pope_w, &paths[3], &row)?;
                            pope_items.push(row.item);
                        }
                    }
                }
                if let Some(w) = diag_w.as_mut() {
                    for d in &out.diagnostics {
                        write_line(w, &paths[1], d)?;
                    }
                }
            }
            rows.push(SummaryRow {
                point,
                strategy,
                decode: decode.clone(),
                generations,
                errors,
                scores: score_group(point.index, strategy, &captions, &pope_items, &prep.pools)?,
                cost: cost_summary(&ledger, &model_cfg),
            });
        }
    }
    for (w, p) in [(&mut gen_w, &paths[0]), (&mut cap_w, &paths[2]), (&mut pope_w, &paths[3])] {
        w.flush().map_err(|source| ExperimentError::Io {
            path: p.clone(),
            source,
        })?;
    }
    if let Some(w) = diag_w.as_mut() {
        w.flush().map_err(|source| ExperimentError::Io {
            path: paths[1].clone(),
            source,
        })?;
    }
    let summary = Summary {
        config: config.clone(),
        model: model_cfg,
        certificate: prep.oracle.certificate.clone(),
        rows,
    };
    write_json(&dir.join(SUMMARY), &summary)?;
    Ok(summary)
}

/// Recomputes metrics from the caption and question files of a finished run.
pub fn score_dir(dir: &Path) -> Result<Vec<ScoreRow>, ExperimentError> {
    let pools: PoolSet = read_json(&dir.join(POOLS))?;
    let captions: Vec<CaptionRow> = read_jsonl(&dir.join(CAPTIONS))?;
    let pope: Vec<PopeRow> = read_jsonl(&dir.join(POPE))?;
    score_rows(&captions, &pope, &pools)
}
