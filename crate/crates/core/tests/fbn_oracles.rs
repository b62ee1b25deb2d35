// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(clippy::needless_range_loop)]

use fbnprune::fbn::{
    assemble_signals, canica, keep_count, layer_mask_set, neuron_scores, select_kept,
    threshold_sources, FbnConfig, SignalMatrix, SignalMode, SourceDecomposition,
};
use fbnprune::model::CaptureRecord;
use fbnprune::numerics::{correlation, z_score_columns, Matrix, RngSeed};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn subject(data: Matrix, id: usize) -> SignalMatrix {
    SignalMatrix {
        layer: 0,
        sample_id: id,
        mode: SignalMode::Product,
        data: z_score_columns(&data, 1e-8).unwrap(),
        z_scored: true,
    }
}

/// Sparse maps over `n` signals: each map owns a disjoint block of signals
/// with Laplace-like weights.
fn planted_maps(k: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let block = n / (2 * k);
    (0..k)
        .map(|c| {
            let mut m = vec![0.0; n];
            for v in &mut m[c * block..(c + 1) * block] {
                let u: f64 = rng.gen_range(0.5..2.0);
                *v = if rng.gen_bool(0.5) { u } else { -u };
            }
            m
        })
        .collect()
}

fn planted_subjects(
    maps: &[Vec<f64>],
    n_subjects: usize,
    tokens: usize,
    seed: u64,
) -> Vec<SignalMatrix> {
    let mut rng = RngSeed(seed).rng();
    let n = maps[0].len();
    (0..n_subjects)
        .map(|s| {
            let tc: Vec<Vec<f64>> = (0..maps.len())
                .map(|_| {
                    (0..tokens)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect();
            let data = Matrix::from_fn(tokens, n, |t, j| {
                let signal: f64 = (0..maps.len()).map(|c| tc[c][t] * maps[c][j]).sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                signal + 0.1 * noise
            });
            subject(data, s)
        })
        .collect()
}

fn cfg(k: usize) -> FbnConfig {
    FbnConfig {
        n_components: k,
        signal_mode: SignalMode::Product,
        ..FbnConfig::default()
    }
}

/// For each true map, the best |correlation| with any recovered source row.
fn best_matches(truth: &[Vec<f64>], sources: &Matrix) -> Vec<f64> {
    truth
        .iter()
        .map(|t| {
            (0..sources.rows())
                .map(|i| correlation(t, sources.row(i)).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

#[test]
fn planted_networks_are_recovered() {
    let mut rng = RngSeed(5).rng();
    let maps = planted_maps(4, 240, &mut rng);
    let group = planted_subjects(&maps, 8, 40, 6);
    let dec = canica(&group, &cfg(4), 0, RngSeed(1)).unwrap();
    for c in best_matches(&maps, &dec.sources) {
        assert!(c >= 0.9, "{c}");
    }
    // planted signals land in the mask and silent ones mostly stay out
    let set = layer_mask_set(0, &[dec], 2.0, SignalMode::Product).unwrap();
    let active: Vec<bool> = (0..240).map(|j| maps.iter().any(|m| m[j] != 0.0)).collect();
    let hits = set
        .unit_mask
        .iter()
        .zip(&active)
        .filter(|(m, a)| **m && **a)
        .count();
    let false_pos = set
        .unit_mask
        .iter()
        .zip(&active)
        .filter(|(m, a)| **m && !**a)
        .count();
    assert!(hits as f64 >= 0.9 * 120.0, "{hits}");
    assert!(false_pos <= 6, "{false_pos}");
}

#[test]
fn subject_order_does_not_change_sources() {
    let mut rng = RngSeed(9).rng();
    let maps = planted_maps(4, 200, &mut rng);
    let group = planted_subjects(&maps, 6, 40, 10);
    let mut reversed = group.clone();
    reversed.reverse();
    let a = canica(&group, &cfg(4), 0, RngSeed(2)).unwrap();
    let b = canica(&reversed, &cfg(4), 0, RngSeed(2)).unwrap();
    let rows_a: Vec<Vec<f64>> = (0..4).map(|i| a.sources.row(i).to_vec()).collect();
    for c in best_matches(&rows_a, &b.sources) {
        assert!(c >= 0.99, "{c}");
    }
}

#[test]
fn gaussian_sources_exceed_threshold_at_normal_rate() {
    let mut rng = RngSeed(3).rng();
    let group: Vec<SignalMatrix> = (0..4)
        .map(|s| {
            let data = Matrix::from_fn(160, 344, |_, _| StandardNormal.sample(&mut rng));
            subject(data, s)
        })
        .collect();
    let dec = canica(&group, &cfg(128), 0, RngSeed(4)).unwrap();
    assert_eq!(dec.sources.shape(), (128, 344));
    let mask = threshold_sources(&dec, 2.0);
    let rate = mask.count_true() as f64 / (128.0 * 344.0);
    // two-sided normal tail beyond 2 is 0.0455
    assert!((rate - 0.0455).abs() < 0.01, "{rate}");
}

fn capture(t: usize, h: usize, seed: u64, scale: &[f64]) -> CaptureRecord {
    let mut rng = RngSeed(seed).rng();
    let mut gen = || Matrix::from_fn(t, h, |_, _| StandardNormal.sample(&mut rng));
    let (mut g, mut u) = (gen(), gen());
    for p in 0..t {
        for j in 0..h {
            g.set(p, j, g.get(p, j) * scale[j]);
            u.set(p, j, u.get(p, j) * scale[j]);
        }
    }
    let prod = Matrix::from_fn(t, h, |p, j| g.get(p, j) * u.get(p, j));
    CaptureRecord {
        layer: 0,
        gate_out: g,
        up_out: u,
        product: prod,
    }
}

#[test]
fn positive_rescaling_of_neurons_leaves_scores_unchanged() {
    let h = 30;
    let c = FbnConfig {
        n_components: 5,
        ..FbnConfig::default()
    };
    let mut rng = RngSeed(12).rng();
    let scale: Vec<f64> = (0..h).map(|_| rng.gen_range(0.1..10.0)).collect();
    let plain: Vec<SignalMatrix> = (0..3)
        .map(|s| {
            assemble_signals(&capture(20, h, s, &[1.0; 30]), s as usize, SignalMode::Both).unwrap()
        })
        .collect();
    let scaled: Vec<SignalMatrix> = (0..3)
        .map(|s| {
            assemble_signals(&capture(20, h, s, &scale), s as usize, SignalMode::Both).unwrap()
        })
        .collect();
    let a = canica(&plain, &c, 0, RngSeed(7)).unwrap();
    let b = canica(&scaled, &c, 0, RngSeed(7)).unwrap();
    let sa = neuron_scores(&[a], SignalMode::Both).unwrap();
    let sb = neuron_scores(&[b], SignalMode::Both).unwrap();
    for (x, y) in sa.iter().zip(&sb) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

fn decomposition(k: usize, n: usize, values: &[f64]) -> SourceDecomposition {
    SourceDecomposition {
        layer: 0,
        group_id: 0,
        sources: Matrix::new(k, n, values.to_vec()).unwrap(),
        mixing: Matrix::identity(k),
        converged: true,
        k_effective: k,
        warnings: Vec::new(),
    }
}

proptest! {
    #[test]
    fn kept_set_is_the_top_quantile(
        scores in prop::collection::hash_set(0u32..1_000_000, 10..200),
        rate in 0.0f64..0.95,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 1000.0).collect();
        let keep = keep_count(scores.len(), rate).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cutoff = sorted[keep - 1];
        let expected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= cutoff).collect();
        prop_assert_eq!(select_kept(&scores, rate).unwrap(), expected);
    }

    #[test]
    fn global_mask_is_the_union_of_group_masks(
        groups in 1usize..4,
        k in 1usize..5,
        h in 1usize..12,
        seed in any::<u64>(),
    ) {
        let n = 2 * h;
        let mut rng = RngSeed(seed).rng();
        let decs: Vec<SourceDecomposition> = (0..groups)
            .map(|_| {
                let v: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                decomposition(k, n, &v)
            })
            .collect();
        let set = layer_mask_set(0, &decs, 2.0, SignalMode::Both).unwrap();
        for j in 0..n {
            let any = decs.iter().any(|d| (0..k).any(|i| d.sources.get(i, j).abs() > 2.0));
            prop_assert_eq!(set.global_mask[j], any);
        }
        for u in 0..h {
            prop_assert_eq!(set.unit_mask[u], set.global_mask[u] || set.global_mask[h + u]);
            let top = decs
                .iter()
                .flat_map(|d| (0..k).flat_map(move |i| [d.sources.get(i, u), d.sources.get(i, h + u)]))
                .map(f64::abs)
                .fold(0.0, f64::max);
            prop_assert_eq!(set.scores[u], top);
        }
    }
}
