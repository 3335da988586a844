use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sid_core::ct2s::{KeepSpec, RefreshPeriod, SelectionMode};
use sid_core::decoder::{CombineMode, SamplerKind};
use sid_core::metrics::{read_json, write_json};
use sid_harness::experiment::{
    run_experiment, score_dir, workers_from_env, ExperimentConfig, Summary, SweepAxes, SweepPreset, SUMMARY,
};
use sid_harness::oracle::OracleSpec;
use sid_harness::report::{render_table, report_rows, write_csv};
use sid_harness::scenario::gen_scenarios;
use sid_harness::strategy::Strategy;

/// Contrastive decoding experiments on synthetic grid scenes.
///
/// Worker threads come from SID_WORKERS (default: all cores).
#[derive(Parser)]
#[command(name = "sid", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scenes and their object pools.
    Gen(GenArgs),
    /// Run every strategy at the base decode config.
    Run(RunArgs),
    /// Run every strategy over a grid of decode configs.
    Sweep(SweepArgs),
    /// Recompute metrics from the caption and question files of a run.
    Score(DirArgs),
    /// Print the comparison table of a run and write its CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Experiment config; only its scenario fields are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Least,
    Most,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Combine {
    Contrastive,
    Additive,
    Off,
}

/// Decode and experiment fields. Unset flags keep the value from `--config`,
/// or the built-in default when there is no config file.
#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated, e.g. baseline-none,sid-contrastive.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    scenario_seed: Option<u64>,
    #[arg(long)]
    pope_per_setting: Option<usize>,
    #[arg(long)]
    pope_seed: Option<u64>,
    #[arg(long)]
    vcd_sigma: Option<f32>,
    #[arg(long)]
    no_describe: bool,
    #[arg(long)]
    no_diagnostics: bool,

    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    capture_layer: Option<usize>,
    #[arg(long, conflicts_with = "keep_count")]
    keep_ratio: Option<f32>,
    #[arg(long)]
    keep_count: Option<usize>,
    /// Only used by strategies that do not fix it themselves.
    #[arg(long, value_enum)]
    selection_mode: Option<Mode>,
    /// Only used by strategies that do not fix it themselves.
    #[arg(long, value_enum)]
    combine_mode: Option<Combine>,
    /// Re-select every N steps; 0 selects once.
    #[arg(long)]
    refresh_every: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<Sampler>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f32>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_plausibility: bool,
    #[arg(long)]
    trace_logits: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Fill the axes with a preset grid instead of listing values.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long = "alphas", value_delimiter = ',')]
    alphas: Vec<f32>,
    #[arg(long = "betas", value_delimiter = ',')]
    betas: Vec<f32>,
    #[arg(long = "layers", value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long = "ratios", value_delimiter = ',')]
    ratios: Vec<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    LayerRatio,
    Alpha,
    Beta,
}

#[derive(Args)]
struct DirArgs {
    #[arg(long, default_value = "out")]
    dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "out")]
    dir: PathBuf,
    /// Defaults to <dir>/report.csv.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn build_config(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut c = load_config(a.config.as_ref())?;
    if let Some(o) = &a.out {
        c.output_dir = o.clone();
    }
    if let Some(list) = &a.strategies {
        c.strategies = list
            .iter()
            .map(|s| Strategy::parse(s).with_context(|| format!("unknown strategy {s}")))
            .collect::<Result<_>>()?;
    }
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(a.scenarios => c.scenario_count);
    set!(a.scenario_seed => c.scenario_seed);
    set!(a.pope_per_setting => c.pope_per_setting);
    set!(a.pope_seed => c.pope_seed);
    set!(a.vcd_sigma => c.vcd_sigma);
    if a.no_describe {
        c.describe = false;
    }
    if a.no_diagnostics {
        c.diagnostics = false;
    }
    let d = &mut c.decode;
    set!(a.alpha => d.alpha);
    set!(a.beta => d.beta);
    set!(a.capture_layer => d.capture_layer);
    set!(a.keep_ratio.map(KeepSpec::Ratio) => d.keep);
    set!(a.keep_count.map(KeepSpec::Count) => d.keep);
    set!(a.selection_mode.map(|m| match m {
        Mode::Least => SelectionMode::Least,
        Mode::Most => SelectionMode::Most,
        Mode::Random => SelectionMode::Random,
    }) => d.selection_mode);
    set!(a.combine_mode.map(|m| match m {
        Combine::Contrastive => CombineMode::Contrastive,
        Combine::Additive => CombineMode::Additive,
        Combine::Off => CombineMode::Off,
    }) => d.combine_mode);
    set!(a.refresh_every.map(|n| if n == 0 { RefreshPeriod::Never } else { RefreshPeriod::Every(n) }) => d.refresh_period);
    set!(a.sampler.map(|s| match s {
        Sampler::Greedy => SamplerKind::Greedy,
        Sampler::Sample => SamplerKind::Sample,
    }) => d.sampler.kind);
    set!(a.temperature => d.sampler.temperature);
    if a.top_k.is_some() {
        d.sampler.top_k = a.top_k;
    }
    if a.top_p.is_some() {
        d.sampler.top_p = a.top_p;
    }
    set!(a.max_new_tokens => d.max_new_tokens);
    set!(a.seed => d.seed);
    if a.no_plausibility {
        d.plausibility = false;
    }
    if a.trace_logits {
        d.trace_logits = true;
    }
    Ok(c)
}

fn execute(config: &ExperimentConfig) -> Result<()> {
    let summary = run_experiment(config, workers_from_env())?;
    print!("{}", render_table(&report_rows(&summary)));
    eprintln!("wrote {}", config.output_dir.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen(a) => {
            let mut c = load_config(a.config.as_ref())?;
            if let Some(s) = a.seed {
                c.scenario_seed = s;
            }
            if let Some(n) = a.count {
                c.scenario_count = n;
            }
            let set = gen_scenarios(&c.scenario, c.scenario_seed, c.scenario_count)?;
            std::fs::create_dir_all(&a.out)?;
            write_json(&a.out.join("scenarios.json"), &set)?;
            write_json(&a.out.join("pools.json"), &set.pool_set())?;
            let spec = OracleSpec::from_scenarios(&set, c.oracle.clone());
            write_json(&a.out.join("oracle_spec.json"), &spec)?;
            eprintln!("wrote {} scenes to {}", set.scenarios.len(), a.out.display());
        }
        Cmd::Run(a) => {
            let mut c = build_config(&a.exp)?;
            c.sweep = SweepAxes::default();
            execute(&c)?;
        }
        Cmd::Sweep(a) => {
            let mut c = build_config(&a.exp)?;
            let listed = SweepAxes {
                alpha: a.alphas,
                beta: a.betas,
                capture_layer: a.layers,
                keep_ratio: a.ratios,
            };
            if let Some(p) = a.preset {
                if !listed.is_empty() {
                    bail!("--preset cannot be combined with explicit axis values");
                }
                let p = match p {
                    Preset::LayerRatio => SweepPreset::LayerRatio,
                    Preset::Alpha => SweepPreset::Alpha,
                    Preset::Beta => SweepPreset::Beta,
                };
                c.sweep = SweepAxes::preset(p, c.oracle.n_layers);
            } else if !listed.is_empty() {
                c.sweep = listed;
            }
            execute(&c)?;
        }
        Cmd::Score(a) => {
            let rows = score_dir(&a.dir)?;
            let path = a.dir.join("scores.json");
            write_json(&path, &rows)?;
            for r in &rows {
                let acc = r.pope.as_ref().map(|p| p.overall.accuracy);
                let cs = r.chair.as_ref().map(|c| c.c_s);
                println!("{:>3} {:<16} pope_acc={acc:?} chair_s={cs:?}", r.point, r.strategy.name());
            }
            eprintln!("wrote {}", path.display());
        }
        Cmd::Report(a) => {
            let summary: Summary = read_json(&a.dir.join(SUMMARY))?;
            let rows = report_rows(&summary);
            print!("{}", render_table(&rows));
            let csv = a.csv.unwrap_or_else(|| a.dir.join("report.csv"));
            write_csv(&csv, &rows)?;
            eprintln!("wrote {}", csv.display());
        }
    }
    Ok(())
}
