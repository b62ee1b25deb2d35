// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic dense linear algebra and statistics.
//!
//! Everything here works in `f64` even though model weights are `f32`: the
//! ICA fixed-point iteration is sensitive to accumulated rounding error.

mod ica;
mod matrix;
mod whiten;

pub use ica::{fast_ica, logcosh_contrast, IcaOptions, IcaResult};
pub use matrix::Matrix;
pub use whiten::{pca_whiten, RankWarning, WhiteningResult};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default guard below which a column is treated as constant.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Seed for every pseudo-random stream in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent child seed for a numbered sub-stream.
    pub fn derive(self, stream: u64) -> RngSeed {
        // splitmix64 finalizer over (seed, stream)
        let mut z = self
            .0
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

/// Standardizes every column to zero mean and unit population standard
/// deviation. Columns whose standard deviation is below `epsilon` become zero.
pub fn z_score_columns(x: &Matrix, epsilon: f64) -> Result<Matrix> {
    if x.is_empty() {
        return Err(Error::Dimension("z-scoring an empty matrix".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Argument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (rows, cols) = x.shape();
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for i in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|s| {
            let std = (s / n).sqrt();
            if std < epsilon {
                0.0
            } else {
                1.0 / std
            }
        })
        .collect();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for ((v, m), s) in x.row(i).iter().zip(&mean).zip(&inv_std) {
            out.push((v - m) * s);
        }
    }
    Ok(Matrix::from_raw(rows, cols, out))
}

/// Standardizes each row across its columns (zero mean, unit population std).
pub(crate) fn standardize_rows(m: &mut Matrix, epsilon: f64) {
    let cols = m.cols() as f64;
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let mean = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let std = var.sqrt();
        let inv = if std < epsilon { 0.0 } else { 1.0 / std };
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Eigenvectors are the columns of the returned matrix,
/// each signed so that its largest-magnitude entry is positive.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    m.ensure_finite("eigendecomposition input")?;
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.data());
    let eig = nalgebra::SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors.set(i, dst, sign * col[i]);
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "eigensolver produced non-finite values".into(),
        ));
    }
    Ok((values, vectors))
}

/// Row covariance `(1/cols) · Xc · Xcᵀ` of a matrix whose rows are variables.
pub fn row_covariance(x: &Matrix) -> Matrix {
    let (rows, cols) = x.shape();
    let mut xc = x.clone();
    for i in 0..rows {
        let r = xc.row_mut(i);
        let mean = r.iter().sum::<f64>() / cols as f64;
        r.iter_mut().for_each(|v| *v -= mean);
    }
    let mut cov = xc.matmul_t(&xc).expect("shapes agree");
    cov.scale(1.0 / cols as f64);
    cov
}

/// Pearson correlation of two equally long slices; 0 when either is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
