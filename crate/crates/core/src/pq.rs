//! Product-quantization layout and the hard and soft quantization maps.
//!
//! A layer's flat weight vector of length `n` is split into `m` sub-vectors of
//! dimension `d`. Sub-vector `i` holds flat entries `i*d .. (i+1)*d`, so the
//! sub-vector-major storage used here is the column-major order of the `d x m`
//! weight matrix and coincides with the original flat order.
//!
//! Codebooks are stored `k x d` (row `j` is codeword `c_j`). Soft quantization
//! of the whole matrix is `A · C` in this orientation (the transpose of
//! `C · A^T` for a `d x k` codebook).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Real;

/// A layer's weights as `m` sub-vectors of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix<T> {
    data: Vec<T>,
    d: usize,
    n: usize,
    pad_count: usize,
}

impl<T: Real> WeightMatrix<T> {
    /// Wraps sub-vector-major data with no padding.
    pub fn from_subvectors(data: Vec<T>, d: usize) -> Result<Self> {
        partition_weights(&data, d, false)
    }

    /// Sub-vector dimension `d`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of sub-vectors `m`.
    #[inline]
    pub fn count(&self) -> usize {
        self.data.len() / self.d
    }

    /// Original flat length before padding.
    #[inline]
    pub fn original_len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    /// Sub-vector `w_i`.
    #[inline]
    pub fn column(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn column_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.d)
    }

    /// All `m * d` entries including padding, in sub-vector-major order.
    #[inline]
    pub fn as_padded_slice(&self) -> &[T] {
        &self.data
    }

    /// Reconstructs the flat weights with padding stripped.
    pub fn flatten(&self) -> Vec<T> {
        self.data[..self.n].to_vec()
    }

    /// Same layout, new contents. `data` must have `m * d` entries.
    pub(crate) fn with_data(&self, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            data,
            d: self.d,
            n: self.n,
            pad_count: self.pad_count,
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        self.with_data(vec![T::zero(); self.data.len()])
    }
}

/// `k` codewords of dimension `d`, stored `k x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook<T> {
    data: Vec<T>,
    k: usize,
    d: usize,
}

impl<T: Real> Codebook<T> {
    pub fn new(data: Vec<T>, k: usize, d: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::param("codebook needs k >= 1 and d >= 1"));
        }
        if data.len() != k * d {
            return Err(Error::shape(format!(
                "codebook data has {} entries, expected k*d = {}",
                data.len(),
                k * d
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::numerics("codebook contains non-finite entries"));
        }
        Ok(Self { data, k, d })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("ragged codebook rows"));
        }
        Self::new(rows.concat(), k, d)
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Codeword `c_j`.
    #[inline]
    pub fn row(&self, j: usize) -> &[T] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.d)
    }

    /// Row-major flattening `c_j[r]` at index `j*d + r`, the ordering every Jacobian uses.
    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::from_row_major(self.k, self.d, self.data.clone())
    }

    /// Frobenius distance to another codebook of the same shape.
    pub fn distance_to(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt()
    }

    /// Permutes rows: output row `j` is input row `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        Self {
            data,
            k: self.k,
            d: self.d,
        }
    }

    /// Bits needed per weight when storing indices into this codebook: `log2(k) / d`.
    pub fn bits_per_weight(&self) -> f64 {
        bits_per_weight(self.k, self.d)
    }
}

pub fn bits_per_weight(k: usize, d: usize) -> f64 {
    (k as f64).log2() / d as f64
}

/// Soft assignments: `m x k`, row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix<T> {
    pub data: Matrix<T>,
    pub tau: T,
}

/// Pairwise 2-norm distances between sub-vectors and codewords, `m x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T> {
    pub data: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizeMode {
    Hard,
    Soft,
}

/// Splits a flat weight vector into sub-vectors of dimension `d`.
///
/// When `n` is not a multiple of `d` and `allow_pad` is set, the trailing
/// sub-vector is zero-padded and [`WeightMatrix::flatten`] strips the padding.
pub fn partition_weights<T: Real>(flat: &[T], d: usize, allow_pad: bool) -> Result<WeightMatrix<T>> {
    if flat.is_empty() {
        return Err(Error::Partition("empty weight vector".into()));
    }
    if d == 0 {
        return Err(Error::Partition("sub-vector dimension must be >= 1".into()));
    }
    if !flat.iter().all(|x| x.is_finite()) {
        return Err(Error::numerics("weights contain non-finite entries"));
    }
    let n = flat.len();
    let rem = n % d;
    let pad_count = if rem == 0 { 0 } else { d - rem };
    if pad_count > 0 && !allow_pad {
        return Err(Error::Partition(format!(
            "length {n} is not divisible by d = {d} and padding is disabled"
        )));
    }
    let mut data = flat.to_vec();
    data.resize(n + pad_count, T::zero());
    Ok(WeightMatrix {
        data,
        d,
        n,
        pad_count,
    })
}

pub(crate) fn check_shapes<T: Real>(w: &WeightMatrix<T>, c: &Codebook<T>) -> Result<()> {
    if w.dim() != c.dim() {
        return Err(Error::shape(format!(
            "sub-vector dimension {} does not match codeword dimension {}",
            w.dim(),
            c.dim()
        )));
    }
    if c.k() > w.count() {
        return Err(Error::param(format!(
            "codebook has {} codewords but only {} sub-vectors",
            c.k(),
            w.count()
        )));
    }
    Ok(())
}

fn check_tau<T: Real>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::param(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

#[inline]
fn euclid<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// `D_ij = ||w_i - c_j||`.
pub fn distance_matrix<T: Real>(w: &WeightMatrix<T>, c: &Codebook<T>) -> Result<DistanceMatrix<T>> {
    check_shapes(w, c)?;
    let data = Matrix::from_fn(w.count(), c.k(), |i, j| euclid(w.column(i), c.row(j)));
    Ok(DistanceMatrix { data })
}

/// Row-wise softmax of `-D / tau`, max-subtracted.
pub fn attention<T: Real>(dist: &DistanceMatrix<T>, tau: T) -> Result<AttentionMatrix<T>> {
    check_tau(tau)?;
    if !dist.data.is_finite() {
        return Err(Error::numerics("non-finite distance"));
    }
    let (m, k) = (dist.data.rows(), dist.data.cols());
    let mut data = Matrix::zeros(m, k);
    for i in 0..m {
        let row = dist.data.row(i);
        let min = row.iter().copied().fold(T::infinity(), T::min);
        let out = data.row_mut(i);
        let mut total = T::zero();
        for (o, &dij) in out.iter_mut().zip(row) {
            *o = ((min - dij) / tau).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    Ok(AttentionMatrix { data, tau })
}

/// Distances and attention in one pass.
pub(crate) fn soft_assign<T: Real>(
    w: &WeightMatrix<T>,
    c: &Codebook<T>,
    tau: T,
) -> Result<(DistanceMatrix<T>, AttentionMatrix<T>)> {
    let dist = distance_matrix(w, c)?;
    let att = attention(&dist, tau)?;
    Ok((dist, att))
}

/// Index of the nearest codeword for every sub-vector, ties to the lowest index.
pub fn hard_assignments<T: Real>(w: &WeightMatrix<T>, c: &Codebook<T>) -> Result<Vec<usize>> {
    check_shapes(w, c)?;
    Ok(w.columns()
        .map(|col| {
            let mut best = 0;
            let mut best_d = T::infinity();
            for (j, cj) in c.rows().enumerate() {
                let dj = euclid(col, cj);
                if dj < best_d {
                    best = j;
                    best_d = dj;
                }
            }
            best
        })
        .collect())
}

/// Replaces every sub-vector by its nearest codeword.
pub fn hard_quantize<T: Real>(w: &WeightMatrix<T>, c: &Codebook<T>) -> Result<WeightMatrix<T>> {
    let assign = hard_assignments(w, c)?;
    let data = assign.iter().flat_map(|&j| c.row(j).iter().copied()).collect();
    Ok(w.with_data(data))
}

fn mix_codewords<T: Real>(w: &WeightMatrix<T>, c: &Codebook<T>, att: &Matrix<T>) -> WeightMatrix<T> {
    let d = w.dim();
    let mut out = w.zeros_like();
    for i in 0..w.count() {
        let col = out.column_mut(i);
        for (j, &a) in att.row(i).iter().enumerate() {
            for (o, &cv) in col.iter_mut().zip(c.row(j)) {
                *o += a * cv;
            }
        }
        debug_assert_eq!(col.len(), d);
    }
    out
}

/// Replaces every sub-vector by its attention-weighted convex combination of codewords.
pub fn soft_quantize<T: Real>(w: &WeightMatrix<T>, c: &Codebook<T>, tau: T) -> Result<WeightMatrix<T>> {
    let (_, att) = soft_assign(w, c, tau)?;
    Ok(mix_codewords(w, c, &att.data))
}

/// Gradients of a scalar objective through soft quantization.
#[derive(Debug, Clone)]
pub struct SoftQuantizeGrads<T> {
    /// Partial derivative with respect to the weights, codebook held fixed.
    pub grad_w: WeightMatrix<T>,
    /// Partial derivative with respect to the codebook, weights held fixed. `k x d`.
    pub grad_c: Matrix<T>,
}

/// Pulls a gradient on attention entries back to sub-vectors and codewords.
///
/// Accumulates into `grad_w` (sub-vector-major, `m*d`) and `grad_c` (`k*d`).
/// The distance is not differentiable where `w_i == c_j`; the zero subgradient is used there.
pub(crate) fn attention_backward<T: Real>(
    w: &WeightMatrix<T>,
    c: &Codebook<T>,
    dist: &DistanceMatrix<T>,
    att: &AttentionMatrix<T>,
    grad_att: &Matrix<T>,
    grad_w: &mut [T],
    grad_c: &mut [T],
) {
    let (m, k, d) = (w.count(), c.k(), w.dim());
    let inv_tau = T::one() / att.tau;
    for i in 0..m {
        let a_row = att.data.row(i);
        let g_row = grad_att.row(i);
        let mean: T = a_row.iter().zip(g_row).map(|(&a, &g)| a * g).sum();
        let wi = w.column(i);
        for j in 0..k {
            // softmax backward then d(-D/tau)
            let g_logit = a_row[j] * (g_row[j] - mean);
            if g_logit == T::zero() {
                continue;
            }
            let dij = dist.data[(i, j)];
            if dij <= T::zero() {
                continue;
            }
            let g_dist = -g_logit * inv_tau / dij;
            let cj = c.row(j);
            for r in 0..d {
                let g = g_dist * (wi[r] - cj[r]);
                grad_w[i * d + r] += g;
                grad_c[j * d + r] -= g;
            }
        }
    }
}

/// Vector-Jacobian product of [`soft_quantize`] with respect to both arguments.
pub fn soft_quantize_vjp<T: Real>(
    upstream: &WeightMatrix<T>,
    w: &WeightMatrix<T>,
    c: &Codebook<T>,
    tau: T,
) -> Result<SoftQuantizeGrads<T>> {
    if upstream.dim() != w.dim() || upstream.count() != w.count() {
        return Err(Error::shape("upstream gradient shape differs from weights"));
    }
    let (dist, att) = soft_assign(w, c, tau)?;
    let (m, k, d) = (w.count(), c.k(), w.dim());
    let mut grad_c = vec![T::zero(); k * d];
    let mut grad_att = Matrix::zeros(m, k);
    for i in 0..m {
        let ui = upstream.column(i);
        for j in 0..k {
            let a = att.data[(i, j)];
            let cj = c.row(j);
            let mut dot = T::zero();
            for r in 0..d {
                grad_c[j * d + r] += a * ui[r];
                dot += ui[r] * cj[r];
            }
            grad_att[(i, j)] = dot;
        }
    }
    let mut grad_w = vec![T::zero(); m * d];
    attention_backward(w, c, &dist, &att, &grad_att, &mut grad_w, &mut grad_c);
    if !grad_w.iter().chain(&grad_c).all(|x| x.is_finite()) {
        return Err(Error::numerics("non-finite gradient in soft quantization"));
    }
    Ok(SoftQuantizeGrads {
        grad_w: w.with_data(grad_w),
        grad_c: Matrix::from_row_major(k, d, grad_c),
    })
}

/// `sum_i ||w_i - quantize(w_i, C)||^2` with the hard or soft quantizer.
pub fn clustering_cost<T: Real>(
    w: &WeightMatrix<T>,
    c: &Codebook<T>,
    mode: QuantizeMode,
    tau: T,
) -> Result<T> {
    let q = match mode {
        QuantizeMode::Hard => hard_quantize(w, c)?,
        QuantizeMode::Soft => soft_quantize(w, c, tau)?,
    };
    Ok(w.as_padded_slice()
        .iter()
        .zip(q.as_padded_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum())
}
