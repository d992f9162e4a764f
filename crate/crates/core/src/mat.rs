//! Dense row-major `f64` matrices.
//!
//! Deliberately small: exactly the operations the trainers and metrics need,
//! single-threaded, allocation-transparent. Shape agreement between two
//! operands is a runtime contract checked by every binary op (configs are
//! user-editable, so mismatches are input errors, not bugs). Indexing within
//! one matrix uses plain slice access.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a closure over (row, col). The closure must return finite
    /// values; this is not re-checked here.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Wrap an owned row-major buffer. Rejects length mismatch and non-finite
    /// entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Mat> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                (rows, cols),
                (data.len(), 1),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Mat::from_vec",
                layer: i / cols.max(1),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Mat> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::shape("Mat::from_rows", (r, c), (i, row.len())));
            }
            data.extend_from_slice(row);
        }
        Mat::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Mat {
        Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// self · other.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "Mat::matmul",
                (self.cols, other.rows),
                other.shape(),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..m {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (p, &av) in arow.iter().enumerate().take(k) {
                if av == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// selfᵀ · other, without materializing the transpose.
    pub fn matmul_at_b(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "Mat::matmul_at_b",
                (self.rows, other.cols),
                other.shape(),
            ));
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Mat::zeros(m, n);
        for p in 0..k {
            let arow = self.row(p);
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate().take(m) {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// self · otherᵀ.
    pub fn matmul_a_bt(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "Mat::matmul_a_bt",
                (other.rows, self.cols),
                other.shape(),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate().take(n) {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *o = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::shape("Mat::sub", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// self += alpha · other.
    pub fn add_assign_scaled(&mut self, other: &Mat, alpha: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Mat::add_assign_scaled",
                self.shape(),
                other.shape(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// [self ‖ other] along columns.
    pub fn hcat(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "Mat::hcat",
                (self.rows, other.cols),
                other.shape(),
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Mat {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Split columns into [0, at) and [at, cols).
    pub fn split_cols(&self, at: usize) -> Result<(Mat, Mat)> {
        if at > self.cols {
            return Err(Error::shape("Mat::split_cols", (self.rows, at), self.shape()));
        }
        let left = Mat::from_fn(self.rows, at, |i, j| self.get(i, j));
        let right = Mat::from_fn(self.rows, self.cols - at, |i, j| self.get(i, at + j));
        Ok((left, right))
    }

    /// New matrix holding the listed rows, in order. Indices may repeat.
    pub fn take_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Vertical concatenation of a list of matrices with equal column counts.
    pub fn vcat(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape("Mat::vcat", (m.rows, cols), m.shape()));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn frob_norm(&self) -> f64 {
        crate::fmath::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean of |entry| per column; empty matrix gives zeros.
    pub fn col_mean_abs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        if self.rows == 0 {
            return out;
        }
        for i in 0..self.rows {
            for (acc, v) in out.iter_mut().zip(self.row(i)) {
                *acc += v.abs();
            }
        }
        for acc in &mut out {
            *acc /= self.rows as f64;
        }
        out
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        if self.rows == 0 {
            return out;
        }
        for i in 0..self.rows {
            for (acc, v) in out.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        for acc in &mut out {
            *acc /= self.rows as f64;
        }
        out
    }
}

/// Squared Euclidean distance between two equal-length slices.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// In-place Cholesky factor (lower triangular) of a symmetric positive
/// definite matrix. Fails on non-PD input.
pub fn cholesky(a: &Mat) -> Result<Mat> {
    if a.rows() != a.cols() {
        return Err(Error::shape("cholesky", (a.rows(), a.rows()), a.shape()));
    }
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Degenerate(alloc::format!(
                        "cholesky pivot {i} is {sum:e}, matrix not positive definite"
                    )));
                }
                l.set(i, j, crate::fmath::sqrt(sum));
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve L Lᵀ x = b for each column of b, given the Cholesky factor L.
pub fn cholesky_solve(l: &Mat, b: &Mat) -> Result<Mat> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::shape("cholesky_solve", (n, b.cols()), b.shape()));
    }
    let mut x = b.clone();
    let cols = x.cols();
    // Forward substitution L y = b.
    for i in 0..n {
        for k in 0..i {
            let lik = l.get(i, k);
            if lik == 0.0 {
                continue;
            }
            for j in 0..cols {
                let v = x.get(k, j);
                x.set(i, j, x.get(i, j) - lik * v);
            }
        }
        let d = l.get(i, i);
        for v in x.row_mut(i) {
            *v /= d;
        }
    }
    // Back substitution Lᵀ x = y.
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l.get(k, i);
            if lki == 0.0 {
                continue;
            }
            for j in 0..cols {
                let v = x.get(k, j);
                x.set(i, j, x.get(i, j) - lki * v);
            }
        }
        let d = l.get(i, i);
        for v in x.row_mut(i) {
            *v /= d;
        }
    }
    Ok(x)
}
