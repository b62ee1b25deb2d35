// SPDX-License-Identifier: MIT OR Apache-2.0

//! PCA reduction and whitening.
//!
//! Rows of the input are variables and columns are observations. The
//! whitened output keeps the observation axis, so a `tokens × neurons`
//! signal matrix whitens to `k × neurons`: the spatial convention used by
//! group ICA.

use super::{symmetric_eigen, Matrix};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Relative eigenvalue cutoff below which a direction counts as rank-deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Emitted when fewer than the requested number of components carry variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankWarning {
    pub requested: usize,
    pub effective: usize,
}

#[derive(Debug, Clone)]
pub struct WhiteningResult {
    /// `k × rows` projector applied to row-centered data.
    pub components: Matrix,
    /// Variance along each retained direction, descending.
    pub explained_variance: Vec<f64>,
    /// Per-row mean removed before projection.
    pub mean: Vec<f64>,
    pub warning: Option<RankWarning>,
}

impl WhiteningResult {
    pub fn k_effective(&self) -> usize {
        self.explained_variance.len()
    }

    /// Applies the stored centering and projection to new data.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "whitener expects {} rows, got {}",
                self.mean.len(),
                x.rows()
            )));
        }
        let xc = center_rows_with(x, &self.mean);
        self.components.matmul(&xc)
    }
}

fn center_rows_with(x: &Matrix, mean: &[f64]) -> Matrix {
    let mut xc = x.clone();
    for (i, m) in mean.iter().enumerate() {
        xc.row_mut(i).iter_mut().for_each(|v| *v -= m);
    }
    xc
}

/// Reduces `x` (variables × observations) to its top `k` principal directions
/// and rescales them to unit variance.
///
/// Returns the projector and the whitened `k × cols` matrix, whose rows have
/// zero mean and identity covariance (population normalization). When the
/// centered data has rank below `k`, only the supported directions are kept
/// and a [`RankWarning`] is attached.
pub fn pca_whiten(x: &Matrix, k: usize) -> Result<(WhiteningResult, Matrix)> {
    let (rows, cols) = x.shape();
    if x.is_empty() {
        return Err(Error::Dimension("whitening an empty matrix".into()));
    }
    if k == 0 || k > rows.min(cols) {
        return Err(Error::Argument(format!(
            "k = {k} must lie in 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )));
    }
    x.ensure_finite("whitening input")?;
    let mean: Vec<f64> = (0..rows)
        .map(|i| x.row(i).iter().sum::<f64>() / cols as f64)
        .collect();
    let xc = center_rows_with(x, &mean);
    let n = cols as f64;

    // Work on whichever Gram matrix is smaller; both share their nonzero
    // spectrum.
    let (values, components) = if rows <= cols {
        let mut cov = xc.matmul_t(&xc)?;
        cov.scale(1.0 / n);
        let (values, vectors) = symmetric_eigen(&cov)?;
        let k_eff = nonzero_rank(&values, k)?;
        let comps = Matrix::from_fn(k_eff, rows, |c, i| vectors.get(i, c) / values[c].sqrt());
        (values[..k_eff].to_vec(), comps)
    } else {
        let mut gram = xc.t_matmul(&xc)?;
        gram.scale(1.0 / n);
        let (values, vectors) = symmetric_eigen(&gram)?;
        let k_eff = nonzero_rank(&values, k)?;
        // u_c = Xc v_c / sqrt(n λ_c); projector row = u_cᵀ / sqrt(λ_c)
        let vk = Matrix::from_fn(k_eff, cols, |c, j| vectors.get(j, c));
        let mut comps = vk.matmul_t(&xc)?;
        for c in 0..k_eff {
            let s = 1.0 / (values[c] * n.sqrt());
            comps.row_mut(c).iter_mut().for_each(|v| *v *= s);
        }
        (values[..k_eff].to_vec(), comps)
    };

    let k_eff = values.len();
    let warning = (k_eff < k).then(|| {
        log::debug!("requested {k} components but data supports only {k_eff}");
        RankWarning {
            requested: k,
            effective: k_eff,
        }
    });
    let whitened = components.matmul(&xc)?;
    whitened.ensure_finite("whitened output")?;
    Ok((
        WhiteningResult {
            components,
            explained_variance: values,
            mean,
            warning,
        },
        whitened,
    ))
}

fn nonzero_rank(values: &[f64], k: usize) -> Result<usize> {
    match supported(values, k) {
        0 => Err(Error::Numeric("data has zero variance".into())),
        n => Ok(n),
    }
}

fn supported(values: &[f64], k: usize) -> usize {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = top * RANK_TOLERANCE;
    values
        .iter()
        .take(k)
        .take_while(|&&v| v > cutoff && v > f64::MIN_POSITIVE)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{row_covariance, RngSeed};
    use rand_distr::{Distribution, StandardNormal};

    fn identity_gap(z: &Matrix) -> f64 {
        let cov = row_covariance(z);
        cov.max_abs_diff(&Matrix::identity(z.rows()))
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngSeed(seed).rng();
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn whitens_both_orientations() {
        for (r, c, k) in [(6, 200, 6), (6, 200, 3), (300, 40, 12)] {
            let mut x = gaussian(r, c, 3);
            // correlate rows
            for i in 1..r {
                for j in 0..c {
                    let prev = x.get(i - 1, j);
                    x.set(i, j, x.get(i, j) + 0.7 * prev + 2.0);
                }
            }
            let (res, z) = pca_whiten(&x, k).unwrap();
            assert_eq!(z.shape(), (k, c));
            assert!(res.warning.is_none());
            assert!(identity_gap(&z) < 1e-6, "{r}x{c}");
            assert!(res.explained_variance.windows(2).all(|w| w[0] >= w[1]));
            assert!(res.transform(&x).unwrap().max_abs_diff(&z) < 1e-9);
        }
    }

    #[test]
    fn white_input_stays_white() {
        let raw = gaussian(4, 500, 9);
        let (_, white) = pca_whiten(&raw, 4).unwrap();
        let (_, again) = pca_whiten(&white, 4).unwrap();
        assert!(identity_gap(&again) < 1e-6);
    }

    #[test]
    fn rank_one_reports_effective_k() {
        let base: Vec<f64> = (0..50).map(|j| (j as f64 * 0.37).sin()).collect();
        let x = Matrix::from_fn(3, 50, |i, j| (i as f64 + 1.0) * base[j]);
        let (res, z) = pca_whiten(&x, 2).unwrap();
        assert_eq!(
            res.warning,
            Some(RankWarning {
                requested: 2,
                effective: 1
            })
        );
        assert_eq!(z.rows(), 1);
    }

    #[test]
    fn argument_errors() {
        let x = gaussian(3, 10, 1);
        assert!(matches!(pca_whiten(&x, 4), Err(Error::Argument(_))));
        assert!(matches!(pca_whiten(&x, 0), Err(Error::Argument(_))));
    }
}
