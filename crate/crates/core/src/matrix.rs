//! Dense row-major `f64` matrices and the handful of primitives the rest of
//! the crate is built from.
//!
//! Every reduction runs left to right over its index, so repeated calls on
//! identical inputs produce bit-identical results. There is no implicit
//! broadcasting; row-vector operations are spelled out.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged or empty input; meant
    /// for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].as_ref().len();
        assert!(cols > 0, "from_rows needs at least one column");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
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

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_rows(&[values])
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Standard product `self × other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(self.shape_error("matmul", other));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let a_row = self.row(i);
            let out_row = &mut out[i * p..(i + 1) * p];
            for (t, &a) in a_row.iter().enumerate().take(m) {
                let b_row = other.row(t);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: p,
            data: out,
        })
    }

    /// `self × otherᵀ` without materializing the transpose.
    pub fn matmul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(self.shape_error("matmul_transpose", other));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ × other` without materializing the transpose.
    pub fn transpose_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(self.shape_error("transpose_matmul", other));
        }
        let (m, p) = (self.cols, other.cols);
        let mut out = vec![0.0; m * p];
        for t in 0..self.rows {
            let a_row = self.row(t);
            let b_row = other.row(t);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[i * p..(i + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: p,
            data: out,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(self.shape_error("add_assign", other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copies rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Matrix> {
        if len == 0 || start + len > self.rows {
            return Err(Error::OutOfBounds {
                index: start + len,
                len: self.rows,
            });
        }
        Ok(Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Copies columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if len == 0 || start + len > self.cols {
            return Err(Error::OutOfBounds {
                index: start + len,
                len: self.cols,
            });
        }
        Ok(Matrix::from_fn(self.rows, len, |i, j| self.get(i, start + j)))
    }

    /// Row-wise softmax. Subtracts the row maximum before exponentiating.
    ///
    /// `-inf` entries (masked positions) map to exactly zero as long as each
    /// row keeps at least one finite entry.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            softmax_in_place(out.row_mut(i));
        }
        out
    }

    /// `e × eᵀ`. Each unordered pair is computed once and mirrored, so the
    /// result is exactly symmetric.
    pub fn gram(&self) -> Matrix {
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    /// Scales each row to unit Euclidean length. All-zero rows are left at zero.
    pub fn normalize_rows(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(i)) {
                *a += v;
            }
        }
        acc
    }

    /// Column-wise arithmetic mean as a plain vector.
    pub fn column_means(&self) -> Vec<f64> {
        let mut acc = self.column_sums();
        let n = self.rows as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Stacks `count` copies of `row`.
    pub fn repeat_row(row: &[f64], count: usize) -> Matrix {
        assert!(count > 0 && !row.is_empty());
        let mut data = Vec::with_capacity(row.len() * count);
        for _ in 0..count {
            data.extend_from_slice(row);
        }
        Matrix {
            rows: count,
            cols: row.len(),
            data,
        }
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(self.shape_error(op, other));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn shape_error(&self, op: &'static str, other: &Matrix) -> Error {
        Error::Shape {
            op,
            left: self.shape(),
            right: other.shape(),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Free-function spelling of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Free-function spelling of [`Matrix::softmax_rows`].
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    scores.softmax_rows()
}

/// Free-function spelling of [`Matrix::gram`].
pub fn gram(e: &Matrix) -> Matrix {
    e.gram()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_times_a_is_a() {
        let a = Matrix::from_rows(&[[1.5, -2.0], [0.25, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn times_zero_is_zero() {
        let a = Matrix::from_rows(&[[1.5, -2.0, 3.0], [0.25, 4.0, 9.0]]);
        let z = Matrix::zeros(3, 4);
        assert_eq!(a.matmul(&z).unwrap(), Matrix::zeros(2, 4));
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(
            a.matmul(&b),
            Err(Error::Shape {
                left: (2, 3),
                right: (2, 3),
                ..
            })
        ));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0);
        let b = Matrix::from_fn(5, 4, |i, j| (i as f64 - j as f64).sin());
        assert_eq!(a.matmul_transpose(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        let c = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(a.transpose_matmul(&c).unwrap(), a.transpose().matmul(&c).unwrap());
    }

    #[test]
    fn softmax_zero_row_is_uniform() {
        let s = Matrix::zeros(1, 4).softmax_rows();
        for &v in s.as_slice() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_constant_row() {
        for c in [-50.0, 0.0, 3.5, 700.0] {
            let s = Matrix::filled(1, 3, c).softmax_rows();
            for &v in s.as_slice() {
                assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn softmax_ln3() {
        let s = Matrix::row_vector(&[0.0, 3f64.ln()]).softmax_rows();
        assert_abs_diff_eq!(s.get(0, 0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 1), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_masked_entries_are_zero() {
        let s = Matrix::row_vector(&[1.0, f64::NEG_INFINITY, 1.0]).softmax_rows();
        assert_eq!(s.as_slice(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn gram_examples() {
        assert_eq!(Matrix::identity(3).gram(), Matrix::identity(3));
        assert_eq!(Matrix::row_vector(&[3.0, 4.0]).gram(), Matrix::from_rows(&[[25.0]]));
        let e = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        assert_eq!(e.gram(), Matrix::from_rows(&[[1.0, 1.0], [1.0, 2.0]]));
    }

    #[test]
    fn from_vec_validates() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(0, 2, vec![]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn slicing_bounds() {
        let m = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(m.slice_rows(1, 2).unwrap().row(0), &[3.0, 4.0, 5.0]);
        assert!(m.slice_rows(2, 2).is_err());
        assert_eq!(m.slice_cols(2, 1).unwrap().as_slice(), &[2.0, 5.0, 8.0]);
    }
}
