//! Dense row-major f64 matrices and the handful of kernels the rest of the
//! crate needs: products, column norms, cosine similarity and top-k.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to column norms unless a caller overrides it.
pub const DEFAULT_EPSILON: f64 = 1e-8;

const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "\n  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "\n]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite matrix element at row {}, col {}",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", cols, bad.len()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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

    /// Builds a matrix element by element. The closure must return finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Matrix, s: f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled", shape_str(self), shape_str(other)));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        let peak = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 || !peak.is_finite() {
            return peak;
        }
        peak * self.data.iter().map(|v| (v / peak) * (v / peak)).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Every row rescaled to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowVector {
    data: Vec<f64>,
}

impl RowVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite vector element at {i}")));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    /// Skips the finiteness check; callers validate separately.
    pub(crate) fn from_unchecked(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

impl From<RowVector> for Vec<f64> {
    fn from(v: RowVector) -> Self {
        v.data
    }
}

pub(crate) fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows, m.cols)
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", shape_str(a), shape_str(b)));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    let row_kernel = |(i, orow): (usize, &mut [f64])| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    };
    // Each output row is reduced sequentially, so the split is thread-count independent.
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m.max(1)).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(m.max(1)).enumerate().for_each(row_kernel);
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", shape_str(a), shape_str(b)));
    }
    matmul(&a.transpose(), b)
}

/// `a * bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", shape_str(a), shape_str(b)));
    }
    matmul(a, &b.transpose())
}

/// Column-wise L2 norms floored at `epsilon`.
pub fn column_l2_norm(v: &Matrix, epsilon: f64) -> Result<RowVector> {
    if v.rows == 0 || v.cols == 0 {
        return Err(Error::shape("column_l2_norm", shape_str(v), "nonempty matrix"));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut sq = vec![0.0; v.cols];
    for r in 0..v.rows {
        for (s, x) in sq.iter_mut().zip(v.row(r)) {
            *s += x * x;
        }
    }
    Ok(RowVector {
        data: sq.into_iter().map(|s| s.sqrt().max(epsilon)).collect(),
    })
}

/// Cosine similarity; a zero vector on either side yields 0.0.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", u.len(), v.len()));
    }
    Ok(cosine_with_norms(u, norm(u), v, norm(v)))
}

#[inline]
pub(crate) fn cosine_with_norms(u: &[f64], nu: f64, v: &[f64], nv: f64) -> f64 {
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot(u, v) / (nu * nv)
}

/// Gallery rows paired with their cached L2 norms, for repeated cosine
/// queries against the same gallery.
#[derive(Debug, Clone)]
pub struct NormedRows<'a> {
    matrix: &'a Matrix,
    norms: Vec<f64>,
}

impl<'a> NormedRows<'a> {
    pub fn new(matrix: &'a Matrix) -> Self {
        let norms = (0..matrix.rows).map(|r| norm(matrix.row(r))).collect();
        Self { matrix, norms }
    }

    pub fn len(&self) -> usize {
        self.matrix.rows
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows == 0
    }

    pub fn norm(&self, row: usize) -> f64 {
        self.norms[row]
    }

    pub fn zero_rows(&self) -> usize {
        self.norms.iter().filter(|&&n| n == 0.0).count()
    }

    /// Cosine of `query` against a single cached row.
    pub fn cosine(&self, query: &[f64], query_norm: f64, row: usize) -> f64 {
        cosine_with_norms(query, query_norm, self.matrix.row(row), self.norms[row])
    }

    /// Cosine of `query` against every cached row.
    pub fn cosine_all(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.matrix.cols {
            return Err(Error::shape(
                "cosine_similarity_batch",
                query.len(),
                shape_str(self.matrix),
            ));
        }
        let qn = norm(query);
        Ok((0..self.matrix.rows)
            .map(|r| self.cosine(query, qn, r))
            .collect())
    }
}

/// Cosine similarity of `query` against every gallery row.
pub fn cosine_similarity_batch(query: &[f64], gallery: &Matrix) -> Result<RowVector> {
    NormedRows::new(gallery)
        .cosine_all(query)
        .map(|data| RowVector { data })
}

/// Descending by score, ties by ascending index.
pub(crate) fn score_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest scores, descending, ties broken by ascending
/// index. `k` larger than the input returns every index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| score_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| score_order(scores, a, b));
    idx
}
