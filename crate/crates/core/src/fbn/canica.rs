// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatial group ICA over a group of subjects.

use super::{FbnConfig, SignalMatrix};
use crate::error::{Error, Result};
use crate::numerics::{
    fast_ica, pca_whiten, standardize_rows, Matrix, RankWarning, RngSeed, DEFAULT_EPSILON,
};

/// Result of one group decomposition: `sources` holds one functional-network
/// map per row, over the layer's signals.
#[derive(Debug, Clone)]
pub struct SourceDecomposition {
    pub layer: usize,
    pub group_id: usize,
    /// `k × n_signals`, rows standardized across signals.
    pub sources: Matrix,
    /// `k × k` map from sources back to the group-reduced data.
    pub mixing: Matrix,
    pub converged: bool,
    pub k_effective: usize,
    pub warnings: Vec<RankWarning>,
}

/// Runs the group pipeline on subjects that share a layer and signal count.
///
/// 1. whiten each subject's `tokens × n` matrix to `k × n`;
/// 2. stack subjects to `(group·k) × n`;
/// 3. whiten the stack to `k × n`;
/// 4. FastICA treating the `n` signals as observations of `k`-vectors.
///
/// Source rows are then re-standardized and signed so that each row's
/// largest-magnitude entry is positive. Requests for more components than a
/// subject or the stack can support are reduced with a recorded warning.
pub fn canica(
    group: &[SignalMatrix],
    cfg: &FbnConfig,
    group_id: usize,
    seed: RngSeed,
) -> Result<SourceDecomposition> {
    cfg.validate()?;
    let first = group
        .first()
        .ok_or_else(|| Error::Argument("empty subject group".into()))?;
    let n = first.n_signals();
    let layer = first.layer;
    if let Some(bad) = group
        .iter()
        .find(|s| s.n_signals() != n || s.layer != layer)
    {
        return Err(Error::Dimension(format!(
            "subject {} (layer {}, {} signals) does not match layer {layer} with {n} signals",
            bad.sample_id,
            bad.layer,
            bad.n_signals()
        )));
    }

    let k = cfg.n_components;
    let mut warnings = Vec::new();
    let mut reduced = Vec::with_capacity(group.len());
    for subject in group {
        let limit = subject.data.rows().min(n);
        let k_subject = if k > limit {
            warnings.push(RankWarning {
                requested: k,
                effective: limit,
            });
            limit
        } else {
            k
        };
        let (res, white) = pca_whiten(&subject.data, k_subject)?;
        if let Some(w) = res.warning {
            warnings.push(w);
        }
        reduced.push(white);
    }
    let stacked = Matrix::vstack(&reduced)?;
    drop(reduced);

    let limit = stacked.rows().min(n);
    let k_group = if k > limit {
        warnings.push(RankWarning {
            requested: k,
            effective: limit,
        });
        limit
    } else {
        k
    };
    let (res, y) = pca_whiten(&stacked, k_group)?;
    if let Some(w) = res.warning {
        warnings.push(w);
    }
    let k_eff = y.rows();
    if k_eff < k {
        log::debug!("layer {layer} group {group_id}: using {k_eff} of {k} requested components");
    }

    let ica = fast_ica(&y, seed, &cfg.ica_options())?;
    let mut sources = ica.unmixing.matmul(&y)?;
    standardize_rows(&mut sources, DEFAULT_EPSILON);
    let mut mixing = ica.unmixing.transpose();
    for i in 0..k_eff {
        let row = sources.row(i);
        let pivot = row.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        if pivot < 0.0 {
            sources.row_mut(i).iter_mut().for_each(|v| *v = -*v);
            for r in 0..k_eff {
                mixing.set(r, i, -mixing.get(r, i));
            }
        }
    }
    Ok(SourceDecomposition {
        layer,
        group_id,
        sources,
        mixing,
        converged: ica.converged,
        k_effective: k_eff,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbn::SignalMode;
    use crate::numerics::{z_score_columns, RngSeed};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn subject(data: Matrix, id: usize) -> SignalMatrix {
        SignalMatrix {
            layer: 0,
            sample_id: id,
            mode: SignalMode::Gate,
            data: z_score_columns(&data, DEFAULT_EPSILON).unwrap(),
            z_scored: true,
        }
    }

    fn random_subject(t: usize, n: usize, seed: u64) -> SignalMatrix {
        let mut rng = RngSeed(seed).rng();
        let m = Matrix::from_fn(t, n, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * g * g
        });
        subject(m, seed as usize)
    }

    #[test]
    fn output_rows_are_standardized_and_signed() {
        let group: Vec<_> = (0..3).map(|s| random_subject(30, 80, s)).collect();
        let cfg = FbnConfig {
            n_components: 5,
            ..FbnConfig::default()
        };
        let dec = canica(&group, &cfg, 0, RngSeed(1)).unwrap();
        assert_eq!(dec.sources.shape(), (5, 80));
        for i in 0..5 {
            let r = dec.sources.row(i);
            let mean = r.iter().sum::<f64>() / 80.0;
            let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 80.0).sqrt();
            assert!(mean.abs() < 1e-8);
            assert!((std - 1.0).abs() < 1e-6);
            let pivot = r
                .iter()
                .copied()
                .fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn oversized_k_is_reduced_with_warning() {
        let group = vec![random_subject(6, 40, 3)];
        let cfg = FbnConfig {
            n_components: 10,
            ..FbnConfig::default()
        };
        let dec = canica(&group, &cfg, 0, RngSeed(1)).unwrap();
        assert!(dec.k_effective <= 6);
        assert!(!dec.warnings.is_empty());
    }

    #[test]
    fn single_subject_is_plain_spatial_ica() {
        let mut rng = RngSeed(5).rng();
        let data = Matrix::from_fn(12, 60, |_, _| rng.gen_range(-1.0..1.0));
        let s = subject(data, 0);
        let cfg = FbnConfig {
            n_components: 4,
            ..FbnConfig::default()
        };
        let dec = canica(std::slice::from_ref(&s), &cfg, 0, RngSeed(2)).unwrap();
        // direct route: whiten once, whiten again (a no-op up to rotation), ICA
        let (_, y1) = pca_whiten(&s.data, 4).unwrap();
        let (_, y2) = pca_whiten(&y1, 4).unwrap();
        let ica = fast_ica(&y2, RngSeed(2), &cfg.ica_options()).unwrap();
        let mut direct = ica.unmixing.matmul(&y2).unwrap();
        standardize_rows(&mut direct, DEFAULT_EPSILON);
        for i in 0..4 {
            let best = (0..4)
                .map(|j| crate::numerics::correlation(dec.sources.row(i), direct.row(j)).abs())
                .fold(0.0, f64::max);
            assert!(best > 0.999, "component {i}: {best}");
        }
    }

    #[test]
    fn rejects_inconsistent_group() {
        let a = random_subject(10, 30, 1);
        let b = random_subject(10, 31, 2);
        let cfg = FbnConfig {
            n_components: 3,
            ..FbnConfig::default()
        };
        assert!(canica(&[a, b], &cfg, 0, RngSeed(0)).is_err());
        assert!(canica(&[], &cfg, 0, RngSeed(0)).is_err());
    }
}
