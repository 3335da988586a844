//! Dense f32 kernels: matrix product, stable softmax, layer norm and masked
//! multi-head attention that hands back its post-softmax weights.
//!
//! Every reduction runs left-to-right over the contracted index so results are
//! bit-stable on a given platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("softmax over an empty vector")]
    EmptySoftmax,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("attention row {row} has no unmasked key")]
    FullyMaskedRow { row: usize },
    #[error("head count {heads} does not divide width {width}")]
    HeadSplit { heads: usize, width: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, NumericError> {
        if data.len() != rows * cols {
            return Err(NumericError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Stacks equal-length rows. An empty slice gives a 0 x `cols` matrix.
    pub fn from_rows(rows: &[Vec<f32>], cols: usize) -> Result<Self, NumericError> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericError::Shape {
                    op: "from_rows",
                    lhs: (1, r.len()),
                    rhs: (1, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<(), NumericError> {
        if row.len() != self.cols {
            return Err(NumericError::Shape {
                op: "push_row",
                lhs: (self.rows, self.cols),
                rhs: (1, row.len()),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// New matrix holding the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), NumericError> {
        if self.shape() != other.shape() {
            return Err(NumericError::Shape {
                op: "add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}

/// `a · b` with a fixed left-to-right accumulation over the shared index.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericError> {
    if a.cols != b.rows {
        return Err(NumericError::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    if !out.is_finite() {
        return Err(NumericError::NonFinite("matmul"));
    }
    Ok(out)
}

/// Row vector times matrix.
pub fn vec_matmul(x: &[f32], b: &Matrix) -> Result<Vec<f32>, NumericError> {
    if x.len() != b.rows {
        return Err(NumericError::Shape {
            op: "vec_matmul",
            lhs: (1, x.len()),
            rhs: b.shape(),
        });
    }
    let mut out = vec![0.0f32; b.cols];
    for (k, &x_k) in x.iter().enumerate() {
        if x_k == 0.0 {
            continue;
        }
        for (o, &b_kj) in out.iter_mut().zip(b.row(k)) {
            *o += x_k * b_kj;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(NumericError::NonFinite("vec_matmul"));
    }
    Ok(out)
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f32]) -> Result<Vec<f32>, NumericError> {
    if x.is_empty() {
        return Err(NumericError::EmptySoftmax);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NumericError::NonFinite("softmax input"));
    }
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Softmax that treats `NEG_INFINITY` entries as masked (probability 0).
/// At least one entry must be finite.
pub fn masked_softmax(x: &[f32]) -> Result<Vec<f32>, NumericError> {
    if x.is_empty() {
        return Err(NumericError::EmptySoftmax);
    }
    let max = x
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return Err(NumericError::FullyMaskedRow { row: 0 });
    }
    let mut out: Vec<f32> = x
        .iter()
        .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f32 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

/// tanh approximation of GELU. `gelu(0.0) == 0.0` exactly.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Boolean attention mask, `true` where a query may attend to a key.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self, NumericError> {
        if allowed.len() != rows * cols {
            return Err(NumericError::DataLength {
                rows,
                cols,
                len: allowed.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Square lower-triangular mask.
    pub fn causal(n: usize) -> Self {
        Self::from_positions(&(0..n).collect::<Vec<_>>(), &(0..n).collect::<Vec<_>>())
    }

    /// Causal mask between arbitrary position lists: a query at position `p`
    /// sees every key whose position is `<= p`.
    pub fn from_positions(query_pos: &[usize], key_pos: &[usize]) -> Self {
        let mut allowed = Vec::with_capacity(query_pos.len() * key_pos.len());
        for &q in query_pos {
            allowed.extend(key_pos.iter().map(|&k| k <= q));
        }
        Self {
            rows: query_pos.len(),
            cols: key_pos.len(),
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Post-softmax attention, laid out `[head][query row][key col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl AttentionWeights {
    pub fn row(&self, head: usize, row: usize) -> &[f32] {
        let start = (head * self.rows + row) * self.cols;
        &self.data[start..start + self.cols]
    }

    pub fn get(&self, head: usize, row: usize, col: usize) -> f32 {
        self.data[(head * self.rows + row) * self.cols + col]
    }

    /// Copies out the last query row of every head: `heads x cols`.
    pub fn last_row(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.heads * self.cols);
        for h in 0..self.heads {
            out.extend_from_slice(self.row(h, self.rows - 1));
        }
        out
    }
}

/// Multi-head attention `softmax(Q Kᵀ · scale + M) V`, heads split evenly
/// across the column dimension of `q`, `k` and `v`.
pub fn masked_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &AttentionMask,
    n_heads: usize,
    scale: f32,
) -> Result<(Matrix, AttentionWeights), NumericError> {
    if q.cols != k.cols || k.cols != v.cols {
        return Err(NumericError::Shape {
            op: "attention qkv width",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if k.rows != v.rows {
        return Err(NumericError::Shape {
            op: "attention kv rows",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    if mask.shape() != (q.rows, k.rows) {
        return Err(NumericError::Shape {
            op: "attention mask",
            lhs: mask.shape(),
            rhs: (q.rows, k.rows),
        });
    }
    if n_heads == 0 || q.cols % n_heads != 0 {
        return Err(NumericError::HeadSplit {
            heads: n_heads,
            width: q.cols,
        });
    }
    let d_head = q.cols / n_heads;
    let (n_q, n_k) = (q.rows, k.rows);
    let mut out = Matrix::zeros(n_q, q.cols);
    let mut weights = vec![0.0f32; n_heads * n_q * n_k];
    let mut scores = vec![0.0f32; n_k];

    for h in 0..n_heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        for r in 0..n_q {
            let q_row = &q.row(r)[lo..hi];
            let mut any = false;
            for (c, s) in scores.iter_mut().enumerate() {
                if mask.is_allowed(r, c) {
                    let k_row = &k.row(c)[lo..hi];
                    let mut dot = 0.0f32;
                    for (a, b) in q_row.iter().zip(k_row) {
                        dot += a * b;
                    }
                    *s = dot * scale;
                    any = true;
                } else {
                    *s = f32::NEG_INFINITY;
                }
            }
            if !any {
                return Err(NumericError::FullyMaskedRow { row: r });
            }
            let probs = masked_softmax(&scores)?;
            let w_start = (h * n_q + r) * n_k;
            weights[w_start..w_start + n_k].copy_from_slice(&probs);
            let out_row = &mut out.row_mut(r)[lo..hi];
            for (c, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let v_row = &v.row(c)[lo..hi];
                for (o, &val) in out_row.iter_mut().zip(v_row) {
                    *o += p * val;
                }
            }
        }
    }
    if !out.is_finite() {
        return Err(NumericError::NonFinite("attention"));
    }
    Ok((
        out,
        AttentionWeights {
            heads: n_heads,
            rows: n_q,
            cols: n_k,
            data: weights,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f64;
                for k in 0..a.cols() {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out.set(i, j, s as f32);
            }
        }
        out
    }

    fn lcg(state: &mut u64) -> f32 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }

    fn random_matrix(rows: usize, cols: usize, state: &mut u64) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| lcg(state)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let b = Matrix::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
        let a = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let c = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut s = 7u64;
        let a = random_matrix(7, 5, &mut s);
        let b = random_matrix(5, 3, &mut s);
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_random_shapes_match_oracle() {
        let mut s = 99u64;
        for t in 0..100 {
            let (m, k, n) = (1 + t % 7, 1 + (t * 3) % 9, 1 + (t * 5) % 6);
            let a = random_matrix(m, k, &mut s);
            let b = random_matrix(k, n, &mut s);
            let got = matmul(&a, &b).unwrap();
            let want = naive(&a, &b);
            for (x, y) in got.data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch_with_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            NumericError::Shape {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-7));
        for c in [-50.0f32, 0.0, 3.5, 80.0] {
            let p = softmax(&[c, c + 3f32.ln()]).unwrap();
            assert!((p[0] - 0.25).abs() < 1e-6 && (p[1] - 0.75).abs() < 1e-6, "{c}: {p:?}");
        }
        assert_eq!(softmax(&[]), Err(NumericError::EmptySoftmax));
    }

    #[test]
    fn softmax_matches_extended_precision() {
        let x = [1.2f32, -0.7, 3.3];
        let ex: Vec<f64> = x.iter().map(|&v| (v as f64).exp()).collect();
        let s: f64 = ex.iter().sum();
        let p = softmax(&x).unwrap();
        for (a, b) in p.iter().zip(&ex) {
            assert!((*a as f64 - b / s).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_singleton_key_gets_all_weight() {
        let q = Matrix::new(1, 4, vec![0.3, -2.0, 7.0, 1.0]).unwrap();
        let k = Matrix::new(1, 4, vec![5.0, 1.0, -1.0, 2.0]).unwrap();
        let v = Matrix::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = AttentionMask::causal(1);
        let (out, w) = masked_attention(&q, &k, &v, &mask, 2, 0.5).unwrap();
        assert_eq!(w.data, vec![1.0, 1.0]);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_orthogonal_query_is_uniform_over_unmasked() {
        let q = Matrix::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let k = Matrix::new(3, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap();
        let v = Matrix::zeros(3, 2);
        let (_, w) = masked_attention(&q, &k, &v, &AttentionMask::causal(3), 1, 1.0).unwrap();
        assert_eq!(w.row(0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(w.row(0, 1), &[0.5, 0.5, 0.0]);
        for x in w.row(0, 2) {
            assert!((x - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let q = Matrix::new(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let k = Matrix::new(3, 2, vec![1.0, 0.0, -0.5, 2.0, 0.3, 0.3]).unwrap();
        let v = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let scale = 1.0 / 2f32.sqrt();
        let (out, w) = masked_attention(&q, &k, &v, &AttentionMask::causal(3), 1, scale).unwrap();
        for r in 0..3 {
            let logits: Vec<f64> = (0..=r)
                .map(|c| (q.get(r, 0) as f64 * k.get(c, 0) as f64 + q.get(r, 1) as f64 * k.get(c, 1) as f64) * scale as f64)
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..3 {
                let want = if c <= r { e[c] / s } else { 0.0 };
                assert!((w.get(0, r, c) as f64 - want).abs() < 1e-6);
            }
            for d in 0..2 {
                let want: f64 = (0..=r).map(|c| e[c] / s * v.get(c, d) as f64).sum();
                assert!((out.get(r, d) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let q = Matrix::zeros(2, 4);
        let k = Matrix::zeros(3, 4);
        let bad_mask = AttentionMask::causal(2);
        assert!(matches!(
            masked_attention(&q, &k, &k, &bad_mask, 2, 1.0),
            Err(NumericError::Shape { .. })
        ));
        let kk = Matrix::zeros(2, 3);
        assert!(masked_attention(&q, &kk, &kk, &AttentionMask::causal(2), 2, 1.0).is_err());
    }

    #[test]
    fn gelu_zero_is_exact() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
    }
}
