//! Dense kernels shared by the forward pass, the incremental decoder and
//! backprop. Every reduction runs in a fixed ascending order, so a given row
//! produces the same bits whether it is computed alone or inside a batch.

use super::{LayerParams, Scalar};

/// Additive score for disallowed attention positions.
pub const MASK_NEG: f64 = -1.0e9;
pub const LN_EPS: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &w) in row.iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &w) in orow.iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
}

/// Transpose of a `rows × cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Sinusoidal position code: `sin(pos / 10000^(2i/d))` for even dimensions
/// `2i`, `cos(..)` for odd dimensions `2i + 1`.
pub fn positional_encoding(pos: usize, dim_index: usize, d_model: usize) -> f64 {
    let i = (dim_index / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
    if dim_index % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Cached layer-norm intermediates for backprop.
#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer norm of `x[n×d]`; returns the output and the cache.
pub fn layer_norm<T: Scalar>(x: &[T], d: usize, gain: &[T], bias: &[T]) -> (Vec<T>, LnCache<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut cache = LnCache { xhat: vec![T::zero(); x.len()], rstd: vec![T::zero(); n] };
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        cache.rstd[i] = rstd;
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            cache.xhat[i * d + j] = xh;
            y[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    (y, cache)
}

/// Scaled dot-product attention of one query row over `n_keys` key/value
/// rows. Keys and values are read at `stride`/`offset` so heads can be
/// column slices of a wider matrix. Disallowed positions get [`MASK_NEG`]
/// added to their score. Writes attention weights into `weights[..n_keys]`
/// and accumulates the weighted values into `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    stride: usize,
    offset: usize,
    n_keys: usize,
    allowed: impl Fn(usize) -> bool,
    weights: &mut [T],
    out: &mut [T],
) {
    let dk = q.len();
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mask = T::from_f64(MASK_NEG);
    let mut max = T::neg_infinity();
    for j in 0..n_keys {
        let k = &keys[j * stride + offset..j * stride + offset + dk];
        let mut s = dot(q, k) * scale;
        if !allowed(j) {
            s = s + mask;
        }
        weights[j] = s;
        if s > max {
            max = s;
        }
    }
    let mut sum = T::zero();
    for w in weights[..n_keys].iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    for w in weights[..n_keys].iter_mut() {
        *w = *w / sum;
    }
    out.fill(T::zero());
    for j in 0..n_keys {
        let w = weights[j];
        let v = &values[j * stride + offset..j * stride + offset + dk];
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}

/// `mask[i·n + j]` is true when query `i` may attend to key `j` (`j ≤ i`).
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|ij| ij % n <= ij / n).collect()
}

/// `softmax(QKᵀ/√d_k)V` with an explicit boolean mask (true = allowed).
pub fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, mask: &[bool]) -> Matrix<T> {
    assert_eq!(q.cols, k.cols, "query/key width");
    assert_eq!(k.rows, v.rows, "key/value length");
    assert_eq!(k.cols, v.cols, "this kernel requires d_v == d_k");
    let (n_q, n_k, dk) = (q.rows, k.rows, q.cols);
    assert_eq!(mask.len(), n_q * n_k, "mask shape");
    let mut out = Matrix::zeros(n_q, dk);
    let mut weights = vec![T::zero(); n_k];
    for i in 0..n_q {
        attend_row(
            q.row(i),
            &k.data,
            &v.data,
            dk,
            0,
            n_k,
            |j| mask[i * n_k + j],
            &mut weights,
            &mut out.data[i * dk..(i + 1) * dk],
        );
    }
    out
}

/// Multi-head self-attention sublayer: project `x` to Q, K, V, attend per
/// head on column slices, concatenate, and apply `W^O`.
pub fn multi_head<T: Scalar>(x: &Matrix<T>, layer: &LayerParams<T>, n_heads: usize, mask: &[bool]) -> Matrix<T> {
    let (n, d) = (x.rows, x.cols);
    let dk = d / n_heads;
    let q = matmul(&x.data, n, d, &layer.wq, d);
    let k = matmul(&x.data, n, d, &layer.wk, d);
    let v = matmul(&x.data, n, d, &layer.wv, d);
    let mut concat = vec![T::zero(); n * d];
    let mut weights = vec![T::zero(); n];
    let mut head_out = vec![T::zero(); dk];
    for h in 0..n_heads {
        for i in 0..n {
            attend_row(
                &q[i * d + h * dk..i * d + (h + 1) * dk],
                &k,
                &v,
                d,
                h * dk,
                n,
                |j| mask[i * n + j],
                &mut weights,
                &mut head_out,
            );
            concat[i * d + h * dk..i * d + (h + 1) * dk].copy_from_slice(&head_out);
        }
    }
    Matrix::new(n, d, matmul(&concat, n, d, &layer.wo, d))
}

/// Softmax of one logit row. The normalizer is accumulated in `f64`;
/// returns the probabilities and `ln Σ exp(l - max)`.
pub fn softmax_row<T: Scalar>(logits: &[T], probs: &mut [T]) -> (T, f64) {
    let mut max = T::neg_infinity();
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let mut sum = 0.0f64;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        sum += p.as_f64();
    }
    for p in probs.iter_mut() {
        *p = T::from_f64(p.as_f64() / sum);
    }
    (max, sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::new(rows, cols, v.to_vec())
    }

    #[test]
    fn positional_values() {
        assert_eq!(positional_encoding(0, 0, 16), 0.0);
        assert_eq!(positional_encoding(0, 1, 16), 1.0);
        for d in [2, 8, 32, 768] {
            assert!((positional_encoding(1, 0, d) - 0.841_470_984_807_896_5).abs() < 1e-12);
        }
        // dim 2 at d_model 4: pos / 10000^(2/4) = pos / 100
        assert!((positional_encoding(3, 2, 4) - (0.03f64).sin()).abs() < 1e-15);
        assert!((positional_encoding(3, 3, 4) - (0.03f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn matmul_kernels_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64 * 0.7).sin()).collect(); // 3x4
        let ab = matmul(&a, 2, 3, &b, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_bt(&a, 2, 3, &bt, 4), ab);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((ab[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        let mut acc = vec![0.0; 12];
        let c: Vec<f64> = (0..8).map(|x| x as f64).collect(); // 2x4
        matmul_at_acc(&a, 2, 3, &c, 4, &mut acc);
        assert_eq!(acc, matmul(&transpose(&a, 2, 3), 3, 2, &c, 4));
    }

    #[test]
    fn single_position_returns_value_row() {
        let q = m(1, 2, &[0.3, -1.0]);
        let k = m(1, 2, &[2.0, 5.0]);
        let v = m(1, 2, &[7.0, -3.0]);
        let out = attention(&q, &k, &v, &[true]);
        assert_eq!(out.data, vec![7.0, -3.0]);
    }

    #[test]
    fn equal_scores_average_allowed_rows() {
        let q = m(3, 2, &[0.0; 6]);
        let k = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = m(3, 2, &[1.0, 10.0, 2.0, 20.0, 6.0, 60.0]);
        let out = attention(&q, &k, &v, &causal_mask(3));
        assert_eq!(out.row(0), &[1.0, 10.0]);
        assert!((out.get(1, 0) - 1.5).abs() < 1e-12);
        assert!((out.get(2, 0) - 3.0).abs() < 1e-12);
        assert!((out.get(2, 1) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn three_position_causal_by_hand() {
        // rows of Q/K/V; scale 1/sqrt(2)
        let q = m(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let k = m(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, -1.0]);
        let v = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = attention(&q, &k, &v, &causal_mask(3));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // row 1: scores [0, 2s]
        let (e0, e1) = (1.0f64, (2.0 * s).exp());
        let w1 = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let want1 = [w1[0] * 1.0 + w1[1] * 3.0, w1[0] * 2.0 + w1[1] * 4.0];
        // row 2: scores [s, 2s, 0]
        let e = [s.exp(), (2.0 * s).exp(), 1.0];
        let z: f64 = e.iter().sum();
        let want2 = [
            (e[0] * 1.0 + e[1] * 3.0 + e[2] * 5.0) / z,
            (e[0] * 2.0 + e[1] * 4.0 + e[2] * 6.0) / z,
        ];
        assert_eq!(out.row(0), &[1.0, 2.0]);
        for c in 0..2 {
            assert!((out.get(1, c) - want1[c]).abs() < 1e-12);
            assert!((out.get(2, c) - want2[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_keys_contribute_exact_zero() {
        // full masked attention == attention over the allowed prefix, bit for bit
        let q = Matrix::new(4, 3, (0..12).map(|x| (x as f32 * 0.37).sin()).collect());
        let k = Matrix::new(4, 3, (0..12).map(|x| (x as f32 * 1.1).cos()).collect());
        let v = Matrix::new(4, 3, (0..12).map(|x| x as f32 - 5.0).collect());
        let full = attention(&q, &k, &v, &causal_mask(4));
        for i in 0..4 {
            let n = i + 1;
            let kp = Matrix::new(n, 3, k.data[..n * 3].to_vec());
            let vp = Matrix::new(n, 3, v.data[..n * 3].to_vec());
            let qi = Matrix::new(1, 3, q.row(i).to_vec());
            let single = attention(&qi, &kp, &vp, &vec![true; n]);
            assert_eq!(single.data.as_slice(), full.row(i));
        }
    }

    #[test]
    fn softmax_row_normalizes() {
        let logits = [1.0f32, 2.0, 3.0, -50.0];
        let mut p = [0.0f32; 4];
        let (max, lse) = softmax_row(&logits, &mut p);
        assert_eq!(max, 3.0);
        let want_lse = ((-2.0f64).exp() + (-1.0f64).exp() + 1.0 + (-53.0f64).exp()).ln();
        assert!((lse - want_lse).abs() < 1e-7);
        let s: f64 = p.iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_row_stats() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let (y, cache) = layer_norm(&x, 4, &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + LN_EPS)).abs() < 1e-12);
        assert_eq!(cache.rstd.len(), 1);
    }
}
