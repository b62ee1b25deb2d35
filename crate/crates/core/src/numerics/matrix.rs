// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f64` matrix.

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
///
/// Every constructor that accepts caller data checks that the buffer length
/// matches the shape and that all entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Wraps a buffer that is finite by construction. Only shape is checked.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply transpose of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; `INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        let mut rows = 0;
        for (i, p) in parts.iter().enumerate() {
            if p.cols != cols {
                return Err(Error::Dimension(format!(
                    "vstack part {i} has {} columns, expected {cols}",
                    p.cols
                )));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::Dimension(format!(
                "hstack part has {} rows, expected {rows}",
                bad.rows
            )));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Copy of the leading `n` rows.
    pub fn top_rows(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix::from_raw(n, self.cols, self.data[..n * self.cols].to_vec())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }
}

/// `c = a · b` for an `m×k` operand `a` and `k×n` operand `b`, each given
/// as `(buffer, row stride, column stride)`. `c` is row-major `m×n`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: strides and extents describe regions inside the given slices;
    // callers derive them from checked matrix shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|t| a.get(i, t) * b.get(t, j)).sum()
        })
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn products_match_naive() {
        let a = Matrix::from_fn(5, 7, |i, j| (i as f64 - 2.0) * 0.3 + j as f64 * 0.11);
        let b = Matrix::from_fn(7, 4, |i, j| ((i * 3 + j) % 5) as f64 - 1.5);
        let c = Matrix::from_fn(4, 7, |i, j| (i as f64).sin() + (j as f64).cos());
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
        assert!(
            a.matmul_t(&c)
                .unwrap()
                .max_abs_diff(&naive(&a, &c.transpose()))
                < 1e-12
        );
        let d = Matrix::from_fn(5, 3, |i, j| (i + j) as f64);
        assert!(
            a.t_matmul(&d)
                .unwrap()
                .max_abs_diff(&naive(&a.transpose(), &d))
                < 1e-12
        );
        assert!(a.matmul(&c).is_err());
    }

    #[test]
    fn stacking() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[5.0], [6.0]]).unwrap();
        let h = Matrix::hstack(&[&a, &b]).unwrap();
        assert_eq!(h.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let v = Matrix::vstack(&[a.clone(), a]).unwrap();
        assert_eq!(v.shape(), (4, 2));
        assert!(Matrix::vstack(&[v, b]).is_err());
    }
}
