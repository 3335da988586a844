//! Per-layer key/value cache and the forward passes that fill it.
//!
//! Each layer keeps, for every live position, the hidden state entering the
//! layer plus the key and value it produced. Keeping the layer inputs is what
//! lets [`Model::prune`] rebuild layers above the prune point over a reduced
//! position set without touching the layers below.

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, TokenSequence};
use crate::numeric::{masked_attention, AttentionMask, Matrix};

/// Abstract compute spent by one call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCost {
    /// One token processed through one transformer layer.
    pub token_layer_passes: u64,
    pub macs: u64,
}

impl std::ops::AddAssign for PassCost {
    fn add_assign(&mut self, o: Self) {
        self.token_layer_passes += o.token_layer_passes;
        self.macs += o.macs;
    }
}

/// Post-softmax attention of the last query position at one layer, per head,
/// over that layer's live key positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturedRow {
    /// 1-based layer index.
    pub layer: usize,
    pub heads: usize,
    pub positions: Vec<usize>,
    /// `heads x positions.len()`, head-major.
    pub weights: Vec<f32>,
}

impl CapturedRow {
    pub fn head_row(&self, h: usize) -> &[f32] {
        let n = self.positions.len();
        &self.weights[h * n..(h + 1) * n]
    }

    /// Scatters into a `heads x total` row; absent positions read 0.
    pub fn dense(&self, total: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.heads * total];
        for h in 0..self.heads {
            for (j, &p) in self.positions.iter().enumerate() {
                out[h * total + p] = self.head_row(h)[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// Present whenever the capture layer was actually computed by this call.
    pub captured: Option<CapturedRow>,
    pub cost: PassCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneState {
    /// Layers `1..=from_layer` keep every position; deeper layers hold text
    /// plus `kept` vision positions.
    pub from_layer: usize,
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    positions: Vec<usize>,
    inputs: Matrix,
    keys: Matrix,
    values: Matrix,
}

impl LayerCache {
    fn empty(d: usize) -> Self {
        Self {
            positions: Vec::new(),
            inputs: Matrix::zeros(0, d),
            keys: Matrix::zeros(0, d),
            values: Matrix::zeros(0, d),
        }
    }

    fn append(&mut self, positions: &[usize], x: &Matrix, k: &Matrix, v: &Matrix) -> Result<(), ModelError> {
        for (r, &p) in positions.iter().enumerate() {
            self.positions.push(p);
            self.inputs.push_row(x.row(r))?;
            self.keys.push_row(k.row(r))?;
            self.values.push_row(v.row(r))?;
        }
        Ok(())
    }

    fn last_index_of(&self, pos: usize) -> Option<usize> {
        match self.positions.last() {
            Some(&p) if p == pos => Some(self.positions.len() - 1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    n_vision: usize,
    next_position: usize,
    final_hidden: Vec<f32>,
    pruned: Option<PruneState>,
}

impl KvCache {
    fn empty(n_layers: usize, d: usize, n_vision: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| LayerCache::empty(d)).collect(),
            n_vision,
            next_position: 0,
            final_hidden: Vec::new(),
            pruned: None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_vision(&self) -> usize {
        self.n_vision
    }

    /// Position the next decoded token will occupy.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn pruned(&self) -> Option<&PruneState> {
        self.pruned.as_ref()
    }

    /// Live positions of 1-based `layer`.
    pub fn live_positions(&self, layer: usize) -> &[usize] {
        &self.layers[layer - 1].positions
    }

    /// Keys of 1-based `layer`, one row per live position.
    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.layers[layer - 1].keys
    }

    pub fn values(&self, layer: usize) -> &Matrix {
        &self.layers[layer - 1].values
    }

    /// Hidden states entering 1-based `layer`.
    pub fn layer_inputs(&self, layer: usize) -> &Matrix {
        &self.layers[layer - 1].inputs
    }

    pub fn final_hidden(&self) -> &[f32] {
        &self.final_hidden
    }
}

impl Model {
    fn check_cache(&self, cache: &KvCache) -> Result<(), ModelError> {
        if cache.layers.len() != self.config.n_layers {
            return Err(ModelError::CacheMismatch(format!(
                "{} cached layers, model has {}",
                cache.layers.len(),
                self.config.n_layers
            )));
        }
        if cache.layers.iter().any(|l| l.inputs.cols() != self.config.d_model) {
            return Err(ModelError::CacheMismatch("width differs from d_model".into()));
        }
        if cache.next_position == 0 {
            return Err(ModelError::CacheMismatch("cache is empty".into()));
        }
        Ok(())
    }

    /// Runs layers `from..L` (0-based) for new rows `x` at `positions`,
    /// appending to the cache as it goes. Returns the last layer's output.
    fn run_layers(
        &self,
        cache: &mut KvCache,
        from: usize,
        mut x: Matrix,
        positions: &[usize],
        capture: Option<usize>,
    ) -> Result<(Matrix, Option<CapturedRow>, PassCost), ModelError> {
        let mut captured = None;
        let mut cost = PassCost::default();
        let scale = self.config.attention_scale();
        for l in from..self.config.n_layers {
            let (q, k, v) = self.project_qkv(l, &x)?;
            let lc = &mut cache.layers[l];
            lc.append(positions, &x, &k, &v)?;
            let mask = AttentionMask::from_positions(positions, &lc.positions);
            let (att, w) = masked_attention(&q, &lc.keys, &lc.values, &mask, self.config.n_heads, scale)?;
            for &p in positions {
                let live = lc.positions.iter().filter(|&&kp| kp <= p).count();
                cost.token_layer_passes += 1;
                cost.macs += self.layer_macs(live);
            }
            if capture == Some(l + 1) {
                captured = Some(CapturedRow {
                    layer: l + 1,
                    heads: w.heads,
                    positions: lc.positions.clone(),
                    weights: w.last_row(),
                });
            }
            x = self.finish_layer(l, &x, &att)?;
        }
        Ok((x, captured, cost))
    }

    /// Causal forward over the whole sequence; the cache ends up holding every
    /// position at every layer.
    pub fn prefill(
        &self,
        seq: &TokenSequence,
        capture_layer: usize,
    ) -> Result<(StepOutput, KvCache), ModelError> {
        let positions: Vec<usize> = (0..seq.len()).collect();
        self.prefill_positions(seq, &positions, capture_layer)
    }

    /// Forward with every vision position removed from every layer; text keeps
    /// its original position indices.
    pub fn prefill_without_vision(
        &self,
        seq: &TokenSequence,
        capture_layer: usize,
    ) -> Result<(StepOutput, KvCache), ModelError> {
        let positions: Vec<usize> = (seq.n_vision()..seq.len()).collect();
        let (out, mut cache) = self.prefill_positions(seq, &positions, capture_layer)?;
        cache.pruned = Some(PruneState {
            from_layer: 0,
            kept: Vec::new(),
        });
        Ok((out, cache))
    }

    fn prefill_positions(
        &self,
        seq: &TokenSequence,
        positions: &[usize],
        capture_layer: usize,
    ) -> Result<(StepOutput, KvCache), ModelError> {
        self.check_capture(capture_layer)?;
        if seq.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_seq,
            });
        }
        if seq.vision().cols() != self.config.d_model {
            return Err(ModelError::VisionWidth {
                expected: self.config.d_model,
                got: seq.vision().cols(),
            });
        }
        for t in seq.text_tokens() {
            self.check_token(t)?;
        }
        let rows: Vec<Vec<f32>> = positions.iter().map(|&p| self.embed_position(seq, p)).collect();
        let x = Matrix::from_rows(&rows, self.config.d_model)?;
        let mut cache = KvCache::empty(self.config.n_layers, self.config.d_model, seq.n_vision());
        let (out, captured, mut cost) = self.run_layers(&mut cache, 0, x, positions, Some(capture_layer))?;
        cache.next_position = seq.len();
        cache.final_hidden = out.row(out.rows() - 1).to_vec();
        let logits = self.unembed(&cache.final_hidden)?;
        cost.macs += self.unembed_macs();
        Ok((
            StepOutput {
                logits,
                captured,
                cost,
            },
            cache,
        ))
    }

    /// Appends one token at the next position and returns next-token logits.
    /// Pruned layers attend only over their own live positions.
    pub fn decode_step(
        &self,
        cache: &mut KvCache,
        token_id: u32,
        capture_layer: usize,
    ) -> Result<StepOutput, ModelError> {
        self.check_cache(cache)?;
        self.check_token(token_id)?;
        self.check_capture(capture_layer)?;
        let pos = cache.next_position;
        if pos >= self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: pos + 1,
                max: self.config.max_seq,
            });
        }
        let x = Matrix::new(1, self.config.d_model, self.embed_token(token_id, pos))?;
        let (out, captured, mut cost) = self.run_layers(cache, 0, x, &[pos], Some(capture_layer))?;
        cache.next_position += 1;
        cache.final_hidden = out.row(0).to_vec();
        let logits = self.unembed(&cache.final_hidden)?;
        cost.macs += self.unembed_macs();
        Ok(StepOutput {
            logits,
            captured,
            cost,
        })
    }

    /// Advances `branch` by the token `source` just processed, reusing the
    /// source's entries for layers `1..=shared_layers` and computing only the
    /// layers above. Both caches must agree on layers `1..=shared_layers`.
    pub fn decode_step_shared(
        &self,
        branch: &mut KvCache,
        source: &KvCache,
        shared_layers: usize,
    ) -> Result<StepOutput, ModelError> {
        self.check_cache(branch)?;
        self.check_cache(source)?;
        let n_layers = self.config.n_layers;
        if shared_layers > n_layers {
            return Err(ModelError::PruneLayer {
                layer: shared_layers,
                n_layers,
            });
        }
        let pos = branch.next_position;
        if source.next_position != pos + 1 {
            return Err(ModelError::CacheMismatch(format!(
                "source is at position {}, branch expects {}",
                source.next_position,
                pos + 1
            )));
        }
        for l in 0..shared_layers {
            let src = &source.layers[l];
            let i = src
                .last_index_of(pos)
                .ok_or_else(|| ModelError::CacheMismatch(format!("source layer {} lacks position {pos}", l + 1)))?;
            let dst = &mut branch.layers[l];
            dst.positions.push(pos);
            dst.inputs.push_row(src.inputs.row(i))?;
            dst.keys.push_row(src.keys.row(i))?;
            dst.values.push_row(src.values.row(i))?;
        }
        let mut cost = PassCost::default();
        let hidden = if shared_layers < n_layers {
            let src = &source.layers[shared_layers];
            let i = src.last_index_of(pos).ok_or_else(|| {
                ModelError::CacheMismatch(format!("source layer {} lacks position {pos}", shared_layers + 1))
            })?;
            let x = Matrix::new(1, self.config.d_model, src.inputs.row(i).to_vec())?;
            let (out, _, c) = self.run_layers(branch, shared_layers, x, &[pos], None)?;
            cost = c;
            out.row(0).to_vec()
        } else {
            source.final_hidden.clone()
        };
        branch.next_position += 1;
        branch.final_hidden = hidden;
        let logits = self.unembed(&branch.final_hidden)?;
        cost.macs += self.unembed_macs();
        Ok(StepOutput {
            logits,
            captured: None,
            cost,
        })
    }

    /// Functional prune: layers `1..=from_layer` are copied, deeper layers are
    /// rebuilt from the stored layer inputs over text positions plus the
    /// `kept` vision positions. Returns the new cache and the last position's
    /// logits under it.
    pub fn prune(
        &self,
        cache: &KvCache,
        kept: &[usize],
        from_layer: usize,
    ) -> Result<(KvCache, StepOutput), ModelError> {
        self.check_cache(cache)?;
        let n_layers = self.config.n_layers;
        if from_layer > n_layers {
            return Err(ModelError::PruneLayer {
                layer: from_layer,
                n_layers,
            });
        }
        let kept = validate_kept(kept, cache.n_vision)?;
        let mut out = cache.clone();
        out.pruned = Some(PruneState {
            from_layer,
            kept: kept.clone(),
        });
        let mut cost = PassCost::default();
        if from_layer < n_layers {
            let src = &cache.layers[from_layer];
            let mut rows = Vec::new();
            let mut positions = Vec::new();
            for (r, &p) in src.positions.iter().enumerate() {
                if p >= cache.n_vision || kept.binary_search(&p).is_ok() {
                    rows.push(r);
                    positions.push(p);
                }
            }
            for &k in &kept {
                if src.positions.binary_search(&k).is_err() {
                    return Err(ModelError::PruneIndex {
                        index: k,
                        n_vision: cache.n_vision,
                    });
                }
            }
            let x = src.inputs.select_rows(&rows);
            for l in from_layer..n_layers {
                out.layers[l] = LayerCache::empty(self.config.d_model);
            }
            let (h, _, c) = self.run_layers(&mut out, from_layer, x, &positions, None)?;
            cost = c;
            out.final_hidden = h.row(h.rows() - 1).to_vec();
        }
        let logits = self.unembed(&out.final_hidden)?;
        cost.macs += self.unembed_macs();
        Ok((
            out,
            StepOutput {
                logits,
                captured: None,
                cost,
            },
        ))
    }

    /// [`Model::prune`] without the logits.
    pub fn prune_cache(&self, cache: &KvCache, kept: &[usize], from_layer: usize) -> Result<KvCache, ModelError> {
        self.prune(cache, kept, from_layer).map(|(c, _)| c)
    }
}

fn validate_kept(kept: &[usize], n_vision: usize) -> Result<Vec<usize>, ModelError> {
    let mut sorted = kept.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(ModelError::DuplicateIndex(w[0]));
        }
    }
    if let Some(&bad) = sorted.iter().find(|&&i| i >= n_vision) {
        return Err(ModelError::PruneIndex { index: bad, n_vision });
    }
    Ok(sorted)
}
