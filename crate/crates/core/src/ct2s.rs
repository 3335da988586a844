//! Attention-guided vision token selection.
//!
//! A vision token's importance is the head-averaged attention the last query
//! position pays to it at the capture layer. Selection keeps the least (or
//! most, or a random subset of) important vision tokens for the amateur
//! branch.

use std::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CapturedRow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Ct2sError {
    #[error("vision position {0} is not live in the captured row")]
    VisionAbsent(usize),
    #[error("score vector is empty")]
    EmptyScores,
    #[error("keep ratio {0} outside (0, 1]")]
    BadRatio(f32),
    #[error("keep count must be at least 1")]
    ZeroCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f32>,
    /// 1-based layer the row was captured at.
    pub source_layer: usize,
    pub source_step: usize,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Least,
    Most,
    Random,
}

/// How many vision tokens survive: a fraction of `n` or an absolute count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepSpec {
    Ratio(f32),
    Count(usize),
}

impl KeepSpec {
    /// `max(1, round(ratio * n))` for ratios, `min(count, n)` for counts.
    pub fn resolve(&self, n: usize) -> Result<usize, Ct2sError> {
        match *self {
            KeepSpec::Ratio(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Ct2sError::BadRatio(r));
                }
                Ok(((r as f64 * n as f64).round() as usize).clamp(1, n.max(1)))
            }
            KeepSpec::Count(0) => Err(Ct2sError::ZeroCount),
            KeepSpec::Count(c) => Ok(c.min(n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    /// Strictly increasing vision indices.
    pub kept: Vec<usize>,
    pub n_vision: usize,
    /// `kept.len() / n_vision`.
    pub ratio: f32,
    pub mode: SelectionMode,
}

impl SelectionMask {
    pub fn dropped(&self) -> Vec<usize> {
        (0..self.n_vision)
            .filter(|i| self.kept.binary_search(i).is_err())
            .collect()
    }
}

/// Mean over heads of the captured row's weight at each vision position
/// `0..n_vision`.
pub fn score_vision(row: &CapturedRow, n_vision: usize, step: usize) -> Result<ScoreVector, Ct2sError> {
    let mut cols = Vec::with_capacity(n_vision);
    for v in 0..n_vision {
        let c = row.positions.binary_search(&v).map_err(|_| Ct2sError::VisionAbsent(v))?;
        cols.push(c);
    }
    let h = row.heads as f32;
    let scores = cols
        .iter()
        .map(|&c| {
            let mut s = 0.0f32;
            for head in 0..row.heads {
                s += row.head_row(head)[c];
            }
            s / h
        })
        .collect();
    Ok(ScoreVector {
        scores,
        source_layer: row.layer,
        source_step: step,
    })
}

/// Picks `keep.resolve(n)` vision indices. Ties go to the lower index;
/// `Random` draws without replacement from a ChaCha stream seeded by `seed`.
pub fn select(scores: &ScoreVector, keep: KeepSpec, mode: SelectionMode, seed: u64) -> Result<SelectionMask, Ct2sError> {
    let n = scores.len();
    if n == 0 {
        return Err(Ct2sError::EmptyScores);
    }
    let k = keep.resolve(n)?;
    let mut kept: Vec<usize> = match mode {
        SelectionMode::Least | SelectionMode::Most => {
            let mut order: Vec<usize> = (0..n).collect();
            let s = &scores.scores;
            order.sort_by(|&a, &b| {
                let by_score = match mode {
                    SelectionMode::Least => s[a].partial_cmp(&s[b]),
                    _ => s[b].partial_cmp(&s[a]),
                };
                by_score.unwrap_or(Ordering::Equal).then(a.cmp(&b))
            });
            order.truncate(k);
            order
        }
        SelectionMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, n, k).into_vec()
        }
    };
    kept.sort_unstable();
    Ok(SelectionMask {
        ratio: k as f32 / n as f32,
        kept,
        n_vision: n,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPeriod {
    /// Select once at prefill, then keep the amateur cache.
    Never,
    /// Re-select every `n` decode steps.
    Every(usize),
}

/// Whether a fresh selection is due at decode `step`.
pub fn refresh_policy(step: usize, period: RefreshPeriod) -> bool {
    match period {
        RefreshPeriod::Never => step == 0,
        RefreshPeriod::Every(0) => step == 0,
        RefreshPeriod::Every(p) => step % p == 0,
    }
}
