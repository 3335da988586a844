//! Cache-free reference forward in f64, written directly from the weight
//! tensors. Shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sid_core::model::{Model, ModelConfig, NormKind, NormWeights, TokenSequence};
use sid_core::numeric::Matrix;

pub struct Reference {
    pub logits: Vec<f64>,
    /// Per layer: live key positions of the last query and its per-head
    /// attention over them.
    pub last_rows: Vec<(Vec<usize>, Vec<Vec<f64>>)>,
}

fn norm(cfg: &ModelConfig, x: &[f64], w: &NormWeights) -> Vec<f64> {
    if cfg.norm == NormKind::Identity {
        return x.to_vec();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * w.gamma[j] as f64 + w.beta[j] as f64)
        .collect()
}

fn vm(x: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (k, xv) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xv * m.get(k, j) as f64;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Embedding of every position of `seq` followed by `extra` tokens.
pub fn embeddings(model: &Model, seq: &TokenSequence, extra: &[u32]) -> Vec<Vec<f64>> {
    let w = model.weights();
    let n = seq.n_vision();
    let text: Vec<u32> = seq.text_tokens().chain(extra.iter().copied()).collect();
    (0..n + text.len())
        .map(|p| {
            let base: Vec<f64> = if p < n {
                seq.vision().row(p).iter().map(|&v| v as f64).collect()
            } else {
                w.token_embedding.row(text[p - n] as usize).iter().map(|&v| v as f64).collect()
            };
            base.iter()
                .zip(w.position_embedding.row(p))
                .map(|(a, &b)| a + b as f64)
                .collect()
        })
        .collect()
}

/// Full causal forward over `x` (one row per position 0..). When `prune` is
/// `Some((i, kept, n_vision))`, layers deeper than `i` see only text
/// positions and the kept vision positions.
pub fn forward(model: &Model, x: &[Vec<f64>], prune: Option<(usize, &[usize], usize)>) -> Reference {
    let cfg = model.config();
    let w = model.weights();
    let (h, dh) = (cfg.n_heads, cfg.d_head);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x: Vec<Vec<f64>> = x.to_vec();
    let total = x.len();
    let mut last_rows = Vec::new();
    for l in 0..cfg.n_layers {
        let lw = &w.layers[l];
        let live: Vec<usize> = (0..total)
            .filter(|&p| match prune {
                Some((i, kept, n)) if l >= i => p >= n || kept.contains(&p),
                _ => true,
            })
            .collect();
        let normed: Vec<Vec<f64>> = x.iter().map(|r| norm(cfg, r, &lw.norm1)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| vm(r, &lw.wq)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| vm(r, &lw.wk)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| vm(r, &lw.wv)).collect();
        let mut next = x.clone();
        for &p in &live {
            let keys: Vec<usize> = live.iter().copied().filter(|&kp| kp <= p).collect();
            let mut attn = vec![0.0; cfg.d_model];
            let mut head_rows = Vec::new();
            for hd in 0..h {
                let lo = hd * dh;
                let s: Vec<f64> = keys
                    .iter()
                    .map(|&kp| (lo..lo + dh).map(|j| q[p][j] * k[kp][j]).sum::<f64>() * scale)
                    .collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let a: Vec<f64> = e.iter().map(|v| v / z).collect();
                for (ai, &kp) in a.iter().zip(&keys) {
                    for j in lo..lo + dh {
                        attn[j] += ai * v[kp][j];
                    }
                }
                head_rows.push(a);
            }
            if p == total - 1 {
                last_rows.push((keys.clone(), head_rows));
            }
            let x2: Vec<f64> = vm(&attn, &lw.wo).iter().zip(&x[p]).map(|(a, b)| a + b).collect();
            let h2 = norm(cfg, &x2, &lw.norm2);
            let hid: Vec<f64> = vm(&h2, &lw.w1)
                .iter()
                .zip(&lw.b1)
                .map(|(a, &b)| gelu(a + b as f64))
                .collect();
            next[p] = vm(&hid, &lw.w2)
                .iter()
                .zip(&lw.b2)
                .zip(&x2)
                .map(|((a, &b), r)| a + b as f64 + r)
                .collect();
        }
        x = next;
    }
    let hf = norm(cfg, &x[total - 1], &w.final_norm);
    let logits = vm(&hf, &w.unembedding)
        .iter()
        .zip(&w.unembedding_bias)
        .map(|(a, &b)| a + b as f64)
        .collect();
    Reference { logits, last_rows }
}

/// A random small model plus a random sequence; `room` extra positions are
/// left for decoding.
pub fn random_case(seed: u64, room: usize) -> (Model, TokenSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heads = rng.random_range(1..=3);
    let d_head = rng.random_range(2..=4);
    let n = rng.random_range(1..=10);
    let m = rng.random_range(1..=4);
    let cfg = ModelConfig {
        n_layers: rng.random_range(2..=4),
        n_heads,
        d_model: n_heads * d_head,
        d_head,
        d_ff: rng.random_range(4..=16),
        vocab_size: rng.random_range(4..=20),
        d_vision: rng.random_range(1..=6),
        max_seq: n + m + room,
        seed,
        norm: NormKind::LayerNorm,
    };
    let model = Model::init(cfg.clone()).unwrap();
    let raw: Vec<f32> = (0..n * cfg.d_vision).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ids: Vec<u32> = (0..m).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let seq = model.build_sequence(&Matrix::new(n, cfg.d_vision, raw).unwrap(), &ids).unwrap();
    (model, seq)
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
