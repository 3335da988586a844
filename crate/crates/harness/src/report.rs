//! Comparison table and plot-ready CSV from a run summary.

use std::path::Path;

use serde::Serialize;
use sid_core::metrics::PopeSetting;

use crate::experiment::{Summary, SummaryRow};

/// One CSV line per (sweep point, strategy). Missing metrics are left blank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub point: usize,
    pub strategy: String,
    pub alpha: f32,
    pub beta: f32,
    pub capture_layer: usize,
    pub keep: String,
    pub acc_random: Option<f64>,
    pub f1_random: Option<f64>,
    pub acc_popular: Option<f64>,
    pub f1_popular: Option<f64>,
    pub acc_adversarial: Option<f64>,
    pub f1_adversarial: Option<f64>,
    pub acc_overall: Option<f64>,
    pub f1_overall: Option<f64>,
    pub chair_s: Option<f64>,
    pub chair_i: Option<f64>,
    pub wpi: Option<f64>,
    pub spi: Option<f64>,
    pub expert_passes: u64,
    pub amateur_passes: u64,
    pub total_passes: u64,
    pub pass_ratio: f64,
    pub generations: usize,
    pub errors: usize,
}

impl ReportRow {
    pub fn from_summary(r: &SummaryRow) -> Self {
        let pope = r.scores.pope.as_ref();
        let setting = |s: PopeSetting| pope.and_then(|p| p.per_setting.get(&s));
        let keep = match r.decode.keep {
            sid_core::ct2s::KeepSpec::Ratio(x) => format!("{x}"),
            sid_core::ct2s::KeepSpec::Count(k) => format!("#{k}"),
        };
        Self {
            point: r.point.index,
            strategy: r.strategy.name().into(),
            alpha: r.decode.alpha,
            beta: r.decode.beta,
            capture_layer: r.decode.capture_layer,
            keep,
            acc_random: setting(PopeSetting::Random).map(|s| s.accuracy),
            f1_random: setting(PopeSetting::Random).map(|s| s.f1),
            acc_popular: setting(PopeSetting::Popular).map(|s| s.accuracy),
            f1_popular: setting(PopeSetting::Popular).map(|s| s.f1),
            acc_adversarial: setting(PopeSetting::Adversarial).map(|s| s.accuracy),
            f1_adversarial: setting(PopeSetting::Adversarial).map(|s| s.f1),
            acc_overall: pope.map(|p| p.overall.accuracy),
            f1_overall: pope.map(|p| p.overall.f1),
            chair_s: r.scores.chair.as_ref().map(|c| c.c_s),
            chair_i: r.scores.chair.as_ref().map(|c| c.c_i),
            wpi: r.scores.text.as_ref().map(|t| t.wpi),
            spi: r.scores.text.as_ref().map(|t| t.spi),
            expert_passes: r.cost.expert_passes,
            amateur_passes: r.cost.amateur_passes,
            total_passes: r.cost.total_passes,
            pass_ratio: r.cost.ratio,
            generations: r.generations,
            errors: r.errors,
        }
    }
}

pub fn report_rows(summary: &Summary) -> Vec<ReportRow> {
    summary.rows.iter().map(ReportRow::from_summary).collect()
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Fixed-width text table, one line per row.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:>3} {:<16} {:>5} {:>5} {:>2} {:>5} | {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>5} | {:>9} {:>9} {:>6}\n",
        "pt", "strategy", "alpha", "beta", "i", "keep", "accR", "f1R", "accP", "f1P", "accA", "f1A", "C_S", "C_I", "WPI",
        "SPI", "expert", "amateur", "ratio"
    );
    for r in rows {
        out += &format!(
            "{:>3} {:<16} {:>5} {:>5} {:>2} {:>5} | {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>5} | {:>9} {:>9} {:>6.3}\n",
            r.point,
            r.strategy,
            r.alpha,
            r.beta,
            r.capture_layer,
            r.keep,
            cell(r.acc_random),
            cell(r.f1_random),
            cell(r.acc_popular),
            cell(r.f1_popular),
            cell(r.acc_adversarial),
            cell(r.f1_adversarial),
            cell(r.chair_s),
            cell(r.chair_i),
            cell(r.wpi),
            cell(r.spi),
            r.expert_passes,
            r.amateur_passes,
            r.pass_ratio
        );
    }
    out
}
