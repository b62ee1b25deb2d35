// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whole-model decomposition: capture, group runs per layer, aggregation.

use super::{
    aggregate_or, assemble_signals, canica, cell_seed, fold_to_units, threshold_sources, FbnConfig,
    Mask, SignalMatrix, SignalMode, SourceDecomposition,
};
use crate::calibration::{plan_groups_seeded, CalibrationSet, GroupPlan};
use crate::error::{Error, Result};
use crate::model::{forward, ModelCheckpoint};
use rayon::prelude::*;

const GROUP_STREAM: u64 = 0x67_72_6f_75_70;

/// Aggregated functional-network masks and scores for one layer.
#[derive(Debug, Clone)]
pub struct LayerMaskSet {
    pub layer: usize,
    pub signal_mode: SignalMode,
    /// One `k × n_signals` mask per group run.
    pub per_group_masks: Vec<Mask>,
    /// OR of every row of every per-group mask.
    pub global_mask: Vec<bool>,
    /// Max |standardized loading| per signal column.
    pub signal_scores: Vec<f64>,
    /// Per hidden unit: the larger of its signal scores.
    pub scores: Vec<f64>,
    /// Per hidden unit: true when any of its signals is in the global mask.
    pub unit_mask: Vec<bool>,
    pub converged: Vec<bool>,
    pub k_effective: Vec<usize>,
    pub threshold: f64,
}

impl LayerMaskSet {
    pub fn group_count(&self) -> usize {
        self.per_group_masks.len()
    }

    pub fn converged_fraction(&self) -> f64 {
        if self.converged.is_empty() {
            return 0.0;
        }
        self.converged.iter().filter(|&&c| c).count() as f64 / self.converged.len() as f64
    }

    pub fn d_hidden(&self) -> usize {
        self.scores.len()
    }
}

/// The compact per-run record kept after a decomposition is thresholded.
struct CellSummary {
    mask: Mask,
    signal_max: Vec<f64>,
    converged: bool,
    k_effective: usize,
}

fn summarize(dec: &SourceDecomposition, tau: f64) -> CellSummary {
    let s = &dec.sources;
    let mut signal_max = vec![0.0f64; s.cols()];
    for i in 0..s.rows() {
        for (m, v) in signal_max.iter_mut().zip(s.row(i)) {
            *m = m.max(v.abs());
        }
    }
    CellSummary {
        mask: threshold_sources(dec, tau),
        signal_max,
        converged: dec.converged,
        k_effective: dec.k_effective,
    }
}

fn assemble_layer(
    layer: usize,
    cells: Vec<CellSummary>,
    mode: SignalMode,
    tau: f64,
) -> Result<LayerMaskSet> {
    let n = cells
        .first()
        .map(|c| c.signal_max.len())
        .ok_or_else(|| Error::Argument(format!("layer {layer} has no group runs")))?;
    let mut signal_scores = vec![0.0f64; n];
    for c in &cells {
        if c.signal_max.len() != n {
            return Err(Error::Dimension(format!(
                "layer {layer}: group runs disagree on signal count"
            )));
        }
        for (s, v) in signal_scores.iter_mut().zip(&c.signal_max) {
            *s = s.max(*v);
        }
    }
    let per_group_masks: Vec<Mask> = cells.iter().map(|c| c.mask.clone()).collect();
    let global_mask = aggregate_or(&per_group_masks)?;
    let scores = fold_to_units(&signal_scores, mode)?;
    let unit_mask = match mode {
        SignalMode::Both => {
            let h = n / 2;
            (0..h)
                .map(|i| global_mask[i] || global_mask[h + i])
                .collect()
        }
        _ => global_mask.clone(),
    };
    Ok(LayerMaskSet {
        layer,
        signal_mode: mode,
        converged: cells.iter().map(|c| c.converged).collect(),
        k_effective: cells.iter().map(|c| c.k_effective).collect(),
        per_group_masks,
        global_mask,
        signal_scores,
        scores,
        unit_mask,
        threshold: tau,
    })
}

/// Builds a layer's mask set from full decompositions.
pub fn layer_mask_set(
    layer: usize,
    decs: &[SourceDecomposition],
    tau: f64,
    mode: SignalMode,
) -> Result<LayerMaskSet> {
    assemble_layer(
        layer,
        decs.iter().map(|d| summarize(d, tau)).collect(),
        mode,
        tau,
    )
}

#[derive(Debug, Clone)]
pub struct FbnAnalysis {
    pub config: FbnConfig,
    pub groups: GroupPlan,
    pub layers: Vec<LayerMaskSet>,
}

impl FbnAnalysis {
    pub fn converged_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.converged.len()).sum();
        let ok: usize = self
            .layers
            .iter()
            .map(|l| l.converged.iter().filter(|&&c| c).count())
            .sum();
        if total == 0 {
            0.0
        } else {
            ok as f64 / total as f64
        }
    }

    pub fn unit_scores(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.scores.clone()).collect()
    }
}

/// The grouping of calibration samples used by [`decompose_model`].
pub fn group_plan(n_samples: usize, cfg: &FbnConfig) -> Result<GroupPlan> {
    plan_groups_seeded(n_samples, cfg.group_size, cfg.seed.derive(GROUP_STREAM))
}

/// Captures every calibration sample, runs one group decomposition per
/// (layer, group) cell and aggregates each layer's results.
///
/// Cells run on a pool of `workers` threads; results are merged in group
/// order, so output does not depend on the worker count.
pub fn decompose_model(
    ckpt: &ModelCheckpoint,
    calib: &CalibrationSet,
    cfg: &FbnConfig,
    workers: usize,
) -> Result<FbnAnalysis> {
    cfg.validate()?;
    let plan = group_plan(calib.len(), cfg)?;
    let n_layers = ckpt.config.n_layers;

    let run_group = |g: usize| -> Result<Vec<CellSummary>> {
        let members = &plan.assignment[g];
        let mut per_layer: Vec<Vec<SignalMatrix>> =
            vec![Vec::with_capacity(members.len()); n_layers];
        for &sid in members {
            let out = forward(ckpt, &calib.samples[sid], true)?;
            for rec in out.captures.expect("capture requested") {
                per_layer[rec.layer].push(assemble_signals(&rec, sid, cfg.signal_mode)?);
            }
        }
        per_layer
            .into_iter()
            .enumerate()
            .map(|(layer, subjects)| {
                let dec = canica(&subjects, cfg, g, cell_seed(cfg.seed, layer, g))?;
                log::debug!(
                    "layer {layer} group {g}: k = {}, converged = {}",
                    dec.k_effective,
                    dec.converged
                );
                Ok(summarize(&dec, cfg.threshold))
            })
            .collect()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("cannot build worker pool: {e}")))?;
    let by_group: Vec<Vec<CellSummary>> = pool.install(|| {
        (0..plan.n_groups)
            .into_par_iter()
            .map(run_group)
            .collect::<Result<Vec<_>>>()
    })?;

    let mut by_layer: Vec<Vec<CellSummary>> = (0..n_layers).map(|_| Vec::new()).collect();
    for cells in by_group {
        for (layer, c) in cells.into_iter().enumerate() {
            by_layer[layer].push(c);
        }
    }
    let layers = by_layer
        .into_iter()
        .enumerate()
        .map(|(l, cells)| assemble_layer(l, cells, cfg.signal_mode, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let analysis = FbnAnalysis {
        config: cfg.clone(),
        groups: plan,
        layers,
    };
    let reduced = analysis
        .layers
        .iter()
        .flat_map(|l| &l.k_effective)
        .filter(|&&k| k < cfg.n_components)
        .count();
    if reduced > 0 {
        log::warn!(
            "{reduced} runs used fewer than the requested {} components",
            cfg.n_components
        );
    }
    log::info!(
        "decomposed {} layers x {} groups, {:.1}% converged",
        n_layers,
        analysis.groups.n_groups,
        100.0 * analysis.converged_fraction()
    );
    Ok(analysis)
}
