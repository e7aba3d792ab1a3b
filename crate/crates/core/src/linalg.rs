//! Dense double-precision linear algebra.
//!
//! Deliberately small and deterministic: row-major `Matrix`, matmul with an
//! optional operation counter, a numerically stable row softmax, LU-based
//! inversion, and the right inverse for wide matrices. Every attention
//! kernel and weight transform in this crate is built from these pieces, so
//! summation order is fixed (ascending index) to keep results reproducible.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Dense row-major matrix of `f64`.
///
/// Token vectors are rows throughout the crate: a sequence of `n` tokens in
/// a `d`-wide embedding is an `n x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidConfig(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::InvalidConfig(
                    "rows of differing lengths".to_string(),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Matrix with i.i.d. normal entries of the given standard deviation.
    pub fn random_normal(rows: usize, cols: usize, std_dev: f64, rng: &mut SplitMix64) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.next_normal_scaled(std_dev))
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Append a row; used by the growable caches.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "push_row",
                lhs: (self.rows, self.cols),
                rhs: (1, row.len()),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Columns `[start, start + width)` as a new matrix. Used to slice one
    /// attention head out of a concatenated projection.
    pub fn col_slice(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column slice out of range");
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            let src = &self.data[i * self.cols + start..i * self.cols + start + width];
            out.data[i * width..(i + 1) * width].copy_from_slice(src);
        }
        out
    }

    /// Plain product; see [`Matrix::matmul_counted`] for the counted form.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        self.matmul_inner(rhs, None)
    }

    /// Product that also records `m*n*p` multiplies and `m*p*(n-1)` adds,
    /// one fused count per dot product of length `n`.
    pub fn matmul_counted(&self, rhs: &Matrix, counter: &mut OpCounter) -> Result<Matrix> {
        self.matmul_inner(rhs, Some(counter))
    }

    fn matmul_inner(&self, rhs: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (m, n, p) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(m, p);
        // ikj order: row-major friendly and identical rounding to the naive
        // ascending-k dot product
        for i in 0..m {
            let out_row = &mut out.data[i * p..(i + 1) * p];
            for k in 0..n {
                let a_ik = self.data[i * n + k];
                let b_row = &rhs.data[k * p..(k + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        }
        if let Some(counter) = counter {
            counter.record_matmul(m, n, p);
        }
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Add a bias row to every row.
    pub fn add_row_bias(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape(),
                rhs: (1, bias.len()),
            });
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, b) in out.data[i * out.cols..(i + 1) * out.cols]
                .iter_mut()
                .zip(bias)
            {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Two-operand multiply/add counts for a region of computation.
///
/// A product of an `m x n` by an `n x p` matrix records `m*n*p` multiplies
/// and `m*p*(n-1)` adds, so `ops()` equals `m*p*(2n-1)` per product.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub muls: u64,
    pub adds: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ops(&self) -> u64 {
        self.muls + self.adds
    }

    pub fn record_matmul(&mut self, m: usize, n: usize, p: usize) {
        self.muls += (m * n * p) as u64;
        self.adds += (m * p * (n.saturating_sub(1))) as u64;
    }

    pub fn merge(&mut self, other: OpCounter) {
        self.muls += other.muls;
        self.adds += other.adds;
    }
}

/// Numerically stable softmax of `scale * scores`.
///
/// The maximum is subtracted before exponentiation. `-inf` entries (masked
/// scores) come out as exact zeros; NaN or `+inf` inputs are rejected.
pub fn softmax_row(scores: &[f64], scale: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("softmax_row"));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
    let mut max = f64::NEG_INFINITY;
    for &s in &scaled {
        if s.is_nan() || s == f64::INFINITY {
            return Err(Error::NonFinite("softmax_row"));
        }
        if s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::NonFinite("softmax_row: all scores masked"));
    }
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// How far apart the LU pivots may be before we call the matrix singular.
pub const PIVOT_RATIO_THRESHOLD: f64 = 1e-12;

struct LuFactors {
    lu: Matrix,
    perm: Vec<usize>,
    min_pivot: f64,
    max_pivot: f64,
}

fn lu_factor(w: &Matrix) -> Result<LuFactors> {
    let n = w.rows();
    if n != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "invert_square",
            lhs: w.shape(),
            rhs: (w.rows(), w.rows()),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("invert_square"));
    }
    let mut lu = w.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot: f64 = 0.0;
    for k in 0..n {
        // partial pivoting: largest magnitude in column k at or below the diagonal
        let mut pivot_row = k;
        let mut pivot_mag = lu.get(k, k).abs();
        for i in k + 1..n {
            let mag = lu.get(i, k).abs();
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = i;
            }
        }
        if pivot_mag == 0.0 {
            return Err(Error::Singular { pivot_ratio: 0.0 });
        }
        if pivot_row != k {
            for j in 0..n {
                let a = lu.get(k, j);
                let b = lu.get(pivot_row, j);
                lu.set(k, j, b);
                lu.set(pivot_row, j, a);
            }
            perm.swap(k, pivot_row);
        }
        min_pivot = min_pivot.min(pivot_mag);
        max_pivot = max_pivot.max(pivot_mag);
        let pivot = lu.get(k, k);
        for i in k + 1..n {
            let factor = lu.get(i, k) / pivot;
            lu.set(i, k, factor);
            for j in k + 1..n {
                let v = lu.get(i, j) - factor * lu.get(k, j);
                lu.set(i, j, v);
            }
        }
    }
    let ratio = min_pivot / max_pivot;
    if ratio < PIVOT_RATIO_THRESHOLD {
        return Err(Error::Singular { pivot_ratio: ratio });
    }
    Ok(LuFactors {
        lu,
        perm,
        min_pivot,
        max_pivot,
    })
}

/// Inverse of a square matrix via LU with partial pivoting.
///
/// Fails with the offending pivot ratio when the smallest pivot magnitude
/// drops below [`PIVOT_RATIO_THRESHOLD`] times the largest.
#[allow(clippy::needless_range_loop)]
pub fn invert_square(w: &Matrix) -> Result<Matrix> {
    let factors = lu_factor(w)?;
    let n = w.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for rhs_col in 0..n {
        // forward substitution on the permuted unit column
        for i in 0..n {
            let mut sum = if factors.perm[i] == rhs_col { 1.0 } else { 0.0 };
            for j in 0..i {
                sum -= factors.lu.get(i, j) * col[j];
            }
            col[i] = sum;
        }
        // back substitution
        for i in (0..n).rev() {
            let mut sum = col[i];
            for j in i + 1..n {
                sum -= factors.lu.get(i, j) * col[j];
            }
            col[i] = sum / factors.lu.get(i, i);
        }
        for i in 0..n {
            inv.set(i, rhs_col, col[i]);
        }
    }
    if !inv.all_finite() {
        return Err(Error::NonFinite("invert_square"));
    }
    Ok(inv)
}

/// Cheap condition estimate from the LU pivot spread.
///
/// Only a lower bound on the true condition number, but enough to flag
/// layers whose inversion should be treated with suspicion.
pub fn condition_estimate(w: &Matrix) -> Result<f64> {
    let factors = lu_factor(w)?;
    Ok(factors.max_pivot / factors.min_pivot)
}

pub fn is_invertible(w: &Matrix) -> bool {
    lu_factor(w).is_ok()
}

/// Right inverse of a wide matrix: `w^T (w w^T)^{-1}`.
///
/// For `w` of shape `d x e` with `e >= d` the result `r` is `e x d` and
/// satisfies `w r = I_d`. A square full-rank `w` reduces to the ordinary
/// inverse.
pub fn right_inverse(w: &Matrix) -> Result<Matrix> {
    if w.cols() < w.rows() {
        return Err(Error::NotWide {
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let wt = w.transposed();
    let gram = w.matmul(&wt)?;
    let gram_inv = invert_square(&gram)?;
    wt.matmul(&gram_inv)
}

/// Elementwise `|a - b| <= atol + rtol * |b|`, the usual closeness check.
pub fn allclose(a: &Matrix, b: &Matrix, rtol: f64, atol: f64) -> Result<bool> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "allclose",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| (x - y).abs() <= atol + rtol * y.abs()))
}

pub const DEFAULT_RTOL: f64 = 1e-5;
pub const DEFAULT_ATOL: f64 = 1e-8;

pub fn allclose_default(a: &Matrix, b: &Matrix) -> Result<bool> {
    allclose(a, b, DEFAULT_RTOL, DEFAULT_ATOL)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "max_abs_diff",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}
