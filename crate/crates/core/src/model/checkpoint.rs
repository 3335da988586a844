//! Flat checkpoint: a JSON manifest next to a little-endian f32 blob.
//!
//! The manifest lists every tensor in storage order with its shape and element
//! offset into the blob. Vectors are stored with shape `[1, n]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Model, ModelConfig, ModelError, ModelWeights, NormWeights};
use crate::numeric::Matrix;

pub const CHECKPOINT_FORMAT: &str = "sid-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    data_file: String,
    tensors: Vec<TensorEntry>,
}

type TensorView<'a> = (String, (usize, usize), &'a [f32]);

fn mat<'a>(out: &mut Vec<TensorView<'a>>, name: String, m: &'a Matrix) {
    out.push((name, m.shape(), m.data()));
}

fn vector<'a>(out: &mut Vec<TensorView<'a>>, name: String, v: &'a [f32]) {
    out.push((name, (1, v.len()), v));
}

pub(crate) fn tensor_views(w: &ModelWeights) -> Vec<TensorView<'_>> {
    let mut out = Vec::new();
    mat(&mut out, "token_embedding".into(), &w.token_embedding);
    mat(&mut out, "vision_projection".into(), &w.vision_projection);
    mat(&mut out, "position_embedding".into(), &w.position_embedding);
    for (i, l) in w.layers.iter().enumerate() {
        vector(&mut out, format!("layers.{i}.norm1.gamma"), &l.norm1.gamma);
        vector(&mut out, format!("layers.{i}.norm1.beta"), &l.norm1.beta);
        mat(&mut out, format!("layers.{i}.wq"), &l.wq);
        mat(&mut out, format!("layers.{i}.wk"), &l.wk);
        mat(&mut out, format!("layers.{i}.wv"), &l.wv);
        mat(&mut out, format!("layers.{i}.wo"), &l.wo);
        vector(&mut out, format!("layers.{i}.norm2.gamma"), &l.norm2.gamma);
        vector(&mut out, format!("layers.{i}.norm2.beta"), &l.norm2.beta);
        mat(&mut out, format!("layers.{i}.w1"), &l.w1);
        vector(&mut out, format!("layers.{i}.b1"), &l.b1);
        mat(&mut out, format!("layers.{i}.w2"), &l.w2);
        vector(&mut out, format!("layers.{i}.b2"), &l.b2);
    }
    vector(&mut out, "final_norm.gamma".into(), &w.final_norm.gamma);
    vector(&mut out, "final_norm.beta".into(), &w.final_norm.beta);
    mat(&mut out, "unembedding".into(), &w.unembedding);
    vector(&mut out, "unembedding_bias".into(), &w.unembedding_bias);
    out
}

/// Writes `<manifest_path>` (JSON) and the blob beside it with a `.bin`
/// extension.
pub fn save_checkpoint(model: &Model, manifest_path: &Path) -> Result<(), ModelError> {
    let bin_path = manifest_path.with_extension("bin");
    let data_file = bin_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| ModelError::Manifest("unusable checkpoint path".into()))?
        .to_string();
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, (r, c), data) in tensor_views(model.weights()) {
        tensors.push(TensorEntry {
            name,
            shape: [r, c],
            offset,
        });
        offset += data.len();
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config().clone(),
        data_file,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ModelError::Manifest(e.to_string()))?;
    fs::write(manifest_path, json)?;
    fs::write(bin_path, blob)?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<Model, ModelError> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Manifest(format!("unknown format {}", manifest.format)));
    }
    let bin_path = manifest_path.with_file_name(&manifest.data_file);
    let bytes = fs::read(bin_path)?;
    if bytes.len() % 4 != 0 {
        return Err(ModelError::Manifest("blob length not a multiple of 4".into()));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let cfg = manifest.config;
    cfg.validate()?;
    let mut weights = ModelWeights::zeros(&cfg);
    let expected: Vec<(String, (usize, usize))> = tensor_views(&weights)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(ModelError::Manifest(format!(
            "{} tensors listed, expected {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut chunks = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name || entry.shape != [shape.0, shape.1] {
            return Err(ModelError::Manifest(format!(
                "tensor {} {:?} where {} {:?} was expected",
                entry.name, entry.shape, name, shape
            )));
        }
        let len = shape.0 * shape.1;
        let end = entry.offset + len;
        if end > floats.len() {
            return Err(ModelError::Manifest(format!("tensor {name} runs past the blob")));
        }
        chunks.push(floats[entry.offset..end].to_vec());
    }
    let mut it = chunks.into_iter();
    let mut next_mat = |r: usize, c: usize| Matrix::new(r, c, it.next().expect("counted above"));
    let d = cfg.d_model;
    weights.token_embedding = next_mat(cfg.vocab_size, d)?;
    weights.vision_projection = next_mat(cfg.d_vision, d)?;
    weights.position_embedding = next_mat(cfg.max_seq, d)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let norm1 = NormWeights {
            gamma: next_mat(1, d)?.into_data(),
            beta: next_mat(1, d)?.into_data(),
        };
        let wq = next_mat(d, d)?;
        let wk = next_mat(d, d)?;
        let wv = next_mat(d, d)?;
        let wo = next_mat(d, d)?;
        let norm2 = NormWeights {
            gamma: next_mat(1, d)?.into_data(),
            beta: next_mat(1, d)?.into_data(),
        };
        let w1 = next_mat(d, cfg.d_ff)?;
        let b1 = next_mat(1, cfg.d_ff)?.into_data();
        let w2 = next_mat(cfg.d_ff, d)?;
        let b2 = next_mat(1, d)?.into_data();
        layers.push(LayerWeights {
            norm1,
            wq,
            wk,
            wv,
            wo,
            norm2,
            w1,
            b1,
            w2,
            b2,
        });
    }
    weights.layers = layers;
    weights.final_norm = NormWeights {
        gamma: next_mat(1, d)?.into_data(),
        beta: next_mat(1, d)?.into_data(),
    };
    weights.unembedding = next_mat(d, cfg.vocab_size)?;
    weights.unembedding_bias = next_mat(1, cfg.vocab_size)?.into_data();
    Model::from_weights(cfg, weights)
}
