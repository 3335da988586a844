//! Logit combination, the plausibility cut, and token samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DecoderError;

/// `(1 + alpha) * expert - alpha * amateur`, evaluated as
/// `expert + alpha * (expert - amateur)` so that equal branches or a zero
/// alpha return the expert bit for bit.
pub fn contrastive_combine(expert: &[f32], amateur: &[f32], alpha: f32) -> Result<Vec<f32>, DecoderError> {
    check_len(expert, amateur)?;
    Ok(expert
        .iter()
        .zip(amateur)
        .map(|(&e, &a)| e + alpha * (e - a))
        .collect())
}

/// `(1 - alpha) * expert + alpha * enhanced`.
pub fn additive_combine(expert: &[f32], enhanced: &[f32], alpha: f32) -> Result<Vec<f32>, DecoderError> {
    check_len(expert, enhanced)?;
    Ok(expert
        .iter()
        .zip(enhanced)
        .map(|(&e, &a)| (1.0 - alpha) * e + alpha * a)
        .collect())
}

fn check_len(a: &[f32], b: &[f32]) -> Result<(), DecoderError> {
    if a.len() != b.len() {
        return Err(DecoderError::LengthMismatch {
            expert: a.len(),
            other: b.len(),
        });
    }
    Ok(())
}

/// Indices `y` with `probs[y] >= beta * max(probs)`, ascending.
pub fn plausibility_support(probs: &[f32], beta: f32) -> Vec<usize> {
    let max = probs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let cut = beta * max;
    (0..probs.len()).filter(|&y| probs[y] >= cut).collect()
}

/// Softmax of `logits` restricted to `support`; everything else is exactly 0.
pub fn masked_distribution(logits: &[f32], support: &[usize]) -> Result<Vec<f32>, DecoderError> {
    let probs = restricted_probs(logits, support, 1.0)?;
    let mut out = vec![0.0f32; logits.len()];
    for (&y, &p) in support.iter().zip(&probs) {
        out[y] = p as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub top_p: Option<f32>,
}

impl SamplerSpec {
    pub fn greedy() -> Self {
        Self {
            kind: SamplerKind::Greedy,
            temperature: 1.0,
            top_k: None,
            top_p: None,
        }
    }

    pub fn sample(temperature: f32, top_k: Option<usize>, top_p: Option<f32>) -> Self {
        Self {
            kind: SamplerKind::Sample,
            temperature,
            top_k,
            top_p,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.kind == SamplerKind::Greedy {
            return Ok(());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DecoderError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(DecoderError::InvalidConfig("top_k must be at least 1".into()));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(DecoderError::InvalidConfig(format!("top_p {p} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self::greedy()
    }
}

/// Softmax of `logits[support] / temperature` in f64, aligned with `support`.
fn restricted_probs(logits: &[f32], support: &[usize], temperature: f32) -> Result<Vec<f64>, DecoderError> {
    if support.is_empty() {
        return Err(DecoderError::EmptySupport);
    }
    let mut scaled = Vec::with_capacity(support.len());
    for &y in support {
        let l = *logits.get(y).ok_or(DecoderError::SupportIndex {
            index: y,
            vocab: logits.len(),
        })?;
        if !l.is_finite() {
            return Err(DecoderError::NonFiniteLogits);
        }
        scaled.push(l as f64 / temperature as f64);
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    Ok(p)
}

/// Lowest-index argmax of `logits` over `support`.
pub fn greedy(logits: &[f32], support: &[usize]) -> Result<u32, DecoderError> {
    let mut best: Option<usize> = None;
    for &y in support {
        let l = *logits.get(y).ok_or(DecoderError::SupportIndex {
            index: y,
            vocab: logits.len(),
        })?;
        if !l.is_finite() {
            return Err(DecoderError::NonFiniteLogits);
        }
        match best {
            Some(b) if logits[b] > l || (logits[b] == l && b < y) => {}
            _ => best = Some(y),
        }
    }
    best.map(|b| b as u32).ok_or(DecoderError::EmptySupport)
}

/// Draws one token. Greedy never touches `rng`; sampling consumes exactly one
/// uniform draw.
pub fn sample<R: Rng + ?Sized>(
    logits: &[f32],
    spec: &SamplerSpec,
    support: &[usize],
    rng: &mut R,
) -> Result<u32, DecoderError> {
    if spec.kind == SamplerKind::Greedy {
        return greedy(logits, support);
    }
    let probs = restricted_probs(logits, support, spec.temperature)?;
    // Candidates by descending probability, lower index first on ties.
    let mut order: Vec<usize> = (0..support.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(support[a].cmp(&support[b])));
    if let Some(k) = spec.top_k {
        order.truncate(k.max(1));
    }
    if let Some(p) = spec.top_p {
        let mut cum = 0.0;
        let mut cut = order.len();
        for (j, &o) in order.iter().enumerate() {
            cum += probs[o];
            if cum >= p as f64 {
                cut = j + 1;
                break;
            }
        }
        order.truncate(cut);
    }
    // Draw in vocabulary order so the mapping from uniform to token is stable.
    order.sort_by_key(|&o| support[o]);
    let total: f64 = order.iter().map(|&o| probs[o]).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for &o in &order {
        cum += probs[o];
        if u < cum {
            return Ok(support[o] as u32);
        }
    }
    Ok(support[*order.last().expect("nonempty support")] as u32)
}
