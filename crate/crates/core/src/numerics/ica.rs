// SPDX-License-Identifier: MIT OR Apache-2.0

//! FastICA with parallel updates and symmetric decorrelation.

use super::{symmetric_eigen, Matrix, RngSeed};
use crate::error::{Error, Result};
use rand_distr::{Distribution, StandardNormal};

/// E[log cosh(ν)] for ν ~ N(0, 1).
const GAUSSIAN_LOGCOSH: f64 = 0.374_567_207_491_437_97;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcaOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Independent random starts; the best one is kept.
    pub restarts: usize,
}

impl Default for IcaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 200,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcaResult {
    /// Orthogonal `k × k` unmixing matrix; sources are `unmixing · y`.
    pub unmixing: Matrix,
    pub converged: bool,
    pub iterations: usize,
    /// Mean negentropy proxy of the recovered sources (larger is better).
    pub contrast: f64,
}

/// Mean over rows of `(E[log cosh s] − E[log cosh ν])²`.
pub fn logcosh_contrast(sources: &Matrix) -> f64 {
    let n = sources.cols() as f64;
    let k = sources.rows();
    if k == 0 {
        return 0.0;
    }
    let total: f64 = (0..k)
        .map(|i| {
            let e = sources.row(i).iter().map(|&u| log_cosh(u)).sum::<f64>() / n;
            (e - GAUSSIAN_LOGCOSH).powi(2)
        })
        .sum();
    total / k as f64
}

#[inline]
fn log_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Estimates an orthogonal unmixing matrix for whitened data `y`
/// (`k × n`, rows uncorrelated with unit variance, columns observations)
/// using the log-cosh contrast `g(u) = tanh(u)`.
///
/// Each restart draws a Gaussian starting matrix from a stream derived from
/// `seed`. Converged restarts are preferred over unconverged ones; ties are
/// broken by the larger contrast. A restart that hits `max_iter` reports its
/// iterate with the smallest convergence gap.
pub fn fast_ica(y: &Matrix, seed: RngSeed, opts: &IcaOptions) -> Result<IcaResult> {
    let k = y.rows();
    if k == 0 {
        return Err(Error::Argument("ICA needs at least one component".into()));
    }
    if y.cols() == 0 {
        return Err(Error::Dimension("ICA input has no observations".into()));
    }
    if opts.restarts == 0 || opts.max_iter == 0 || opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::Argument(format!("invalid ICA options {opts:?}")));
    }
    y.ensure_finite("ICA input")?;

    let mut best: Option<IcaResult> = None;
    for restart in 0..opts.restarts {
        let run = single_run(y, seed.derive(restart as u64), opts)?;
        let better = match &best {
            None => true,
            Some(b) => {
                (run.converged && !b.converged)
                    || (run.converged == b.converged && run.contrast > b.contrast)
            }
        };
        if better {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    if !best.converged {
        log::debug!(
            "FastICA did not converge in {} iterations (k = {k})",
            opts.max_iter
        );
    }
    Ok(best)
}

fn single_run(y: &Matrix, seed: RngSeed, opts: &IcaOptions) -> Result<IcaResult> {
    let (k, n) = y.shape();
    let mut rng = seed.rng();
    let w0 = Matrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&w0)?;

    let mut best_w = w.clone();
    let mut best_gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let inv_n = 1.0 / n as f64;

    for it in 1..=opts.max_iter {
        iterations = it;
        let mut g = w.matmul(y)?;
        let mut g_prime_mean = vec![0.0; k];
        for i in 0..k {
            let mut acc = 0.0;
            for v in g.row_mut(i) {
                let t = v.tanh();
                *v = t;
                acc += 1.0 - t * t;
            }
            g_prime_mean[i] = acc * inv_n;
        }
        let mut w_next = g.matmul_t(y)?;
        for i in 0..k {
            let gp = g_prime_mean[i];
            for (dst, src) in w_next.row_mut(i).iter_mut().zip(w.row(i)) {
                *dst = *dst * inv_n - gp * src;
            }
        }
        w_next.ensure_finite("ICA update")?;
        let w_next = symmetric_decorrelation(&w_next)?;

        let gap = (0..k)
            .map(|i| {
                let dot: f64 = w_next.row(i).iter().zip(w.row(i)).map(|(a, b)| a * b).sum();
                (1.0 - dot.abs()).abs()
            })
            .fold(0.0, f64::max);
        w = w_next;
        if gap < best_gap {
            best_gap = gap;
            best_w.clone_from(&w);
        }
        if gap < opts.tol {
            converged = true;
            break;
        }
    }

    let unmixing = if converged { w } else { best_w };
    let contrast = logcosh_contrast(&unmixing.matmul(y)?);
    Ok(IcaResult {
        unmixing,
        converged,
        iterations,
        contrast,
    })
}

/// `W ← (W Wᵀ)^(-1/2) W`.
fn symmetric_decorrelation(w: &Matrix) -> Result<Matrix> {
    let k = w.rows();
    let wwt = w.matmul_t(w)?;
    let (values, vectors) = symmetric_eigen(&wwt)?;
    let floor = values[0].abs() * 1e-14;
    if values.iter().any(|&v| v.is_nan() || v <= floor) {
        return Err(Error::Numeric(
            "singular matrix during symmetric decorrelation".into(),
        ));
    }
    // E · diag(λ^-1/2) · Eᵀ
    let scaled = Matrix::from_fn(k, k, |i, j| vectors.get(i, j) / values[j].sqrt());
    let inv_sqrt = scaled.matmul_t(&vectors)?;
    inv_sqrt.matmul(w)
}
