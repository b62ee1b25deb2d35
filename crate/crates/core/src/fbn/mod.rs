// SPDX-License-Identifier: MIT OR Apache-2.0

//! Functional-network analysis of MLP neurons.
//!
//! Each calibration sample's MLP activations form a `tokens × neurons` signal
//! matrix (one "subject"). Groups of subjects go through a spatial group ICA
//! ([`canica`]); the rows of each source matrix are functional-network maps
//! over neurons. Thresholding the standardized maps yields masks, masks are
//! OR-ed across groups, and each neuron's strongest loading becomes its
//! importance score.

mod canica;
mod io;
mod pipeline;

pub use canica::{canica, SourceDecomposition};
pub use io::{
    parse_signal_dump, read_signal_dump, signal_dump_bytes, write_signal_dump, LayerMaskEntry,
    MaskFile, SIGNAL_MAGIC,
};
pub use pipeline::{decompose_model, group_plan, layer_mask_set, FbnAnalysis, LayerMaskSet};

use crate::error::{Error, Result};
use crate::model::CaptureRecord;
use crate::numerics::{z_score_columns, IcaOptions, Matrix, RngSeed, DEFAULT_EPSILON};
use serde::{Deserialize, Serialize};

/// Which MLP outputs become neuron signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignalMode {
    /// Post-activation gate output.
    Gate,
    Up,
    /// Gate and up outputs side by side: `2 · d_hidden` signals.
    #[default]
    Both,
    /// Elementwise gate ⊙ up.
    Product,
}

impl SignalMode {
    pub fn n_signals(self, d_hidden: usize) -> usize {
        match self {
            SignalMode::Both => 2 * d_hidden,
            _ => d_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbnConfig {
    /// Functional networks extracted per group run.
    pub n_components: usize,
    /// Cutoff on standardized source loadings.
    pub threshold: f64,
    /// Subjects (calibration samples) per group run.
    pub group_size: usize,
    pub signal_mode: SignalMode,
    pub seed: RngSeed,
    pub ica_tol: f64,
    pub ica_max_iter: usize,
    pub ica_restarts: usize,
}

impl Default for FbnConfig {
    fn default() -> Self {
        Self {
            n_components: 128,
            threshold: 2.0,
            group_size: 40,
            signal_mode: SignalMode::Both,
            seed: RngSeed(0),
            ica_tol: 1e-4,
            ica_max_iter: 200,
            ica_restarts: 3,
        }
    }
}

impl FbnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::Argument("n_components must be at least 1".into()));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::Argument(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Argument("group_size must be positive".into()));
        }
        Ok(())
    }

    pub fn ica_options(&self) -> IcaOptions {
        IcaOptions {
            tol: self.ica_tol,
            max_iter: self.ica_max_iter,
            restarts: self.ica_restarts,
        }
    }
}

/// One subject's z-scored neuron signals for one layer.
#[derive(Debug, Clone)]
pub struct SignalMatrix {
    pub layer: usize,
    pub sample_id: usize,
    pub mode: SignalMode,
    /// tokens × n_signals
    pub data: Matrix,
    pub z_scored: bool,
}

impl SignalMatrix {
    pub fn n_signals(&self) -> usize {
        self.data.cols()
    }
}

/// Builds a subject's signal matrix from one layer's capture and z-scores
/// every neuron over the sample's tokens.
pub fn assemble_signals(
    record: &CaptureRecord,
    sample_id: usize,
    mode: SignalMode,
) -> Result<SignalMatrix> {
    let shape = record.gate_out.shape();
    if record.up_out.shape() != shape || record.product.shape() != shape {
        return Err(Error::Dimension(format!(
            "capture for layer {} has inconsistent shapes: gate {:?}, up {:?}, product {:?}",
            record.layer,
            shape,
            record.up_out.shape(),
            record.product.shape()
        )));
    }
    let raw = match mode {
        SignalMode::Gate => record.gate_out.clone(),
        SignalMode::Up => record.up_out.clone(),
        SignalMode::Product => record.product.clone(),
        SignalMode::Both => Matrix::hstack(&[&record.gate_out, &record.up_out])?,
    };
    Ok(SignalMatrix {
        layer: record.layer,
        sample_id,
        mode,
        data: z_score_columns(&raw, DEFAULT_EPSILON)?,
        z_scored: true,
    })
}

/// Row-major boolean matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} mask needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mask { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Marks entries whose standardized loading exceeds `tau` in magnitude.
pub fn threshold_sources(dec: &SourceDecomposition, tau: f64) -> Mask {
    let s = &dec.sources;
    Mask {
        rows: s.rows(),
        cols: s.cols(),
        data: s.data().iter().map(|v| v.abs() > tau).collect(),
    }
}

/// Column-wise OR over every row of every mask.
pub fn aggregate_or(masks: &[Mask]) -> Result<Vec<bool>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Argument("no masks to aggregate".into()))?;
    let cols = first.cols;
    let mut out = vec![false; cols];
    for (g, m) in masks.iter().enumerate() {
        if m.cols != cols {
            return Err(Error::Dimension(format!(
                "mask {g} has width {}, expected {cols}",
                m.cols
            )));
        }
        for i in 0..m.rows {
            for (o, &b) in out.iter_mut().zip(m.row(i)) {
                *o |= b;
            }
        }
    }
    Ok(out)
}

/// Per-signal maximum absolute standardized loading over all decompositions.
pub fn signal_scores(decs: &[SourceDecomposition]) -> Result<Vec<f64>> {
    let first = decs
        .first()
        .ok_or_else(|| Error::Argument("no decompositions to score".into()))?;
    let n = first.sources.cols();
    let mut scores = vec![0.0f64; n];
    for d in decs {
        if d.sources.cols() != n {
            return Err(Error::Dimension(format!(
                "decomposition of group {} covers {} signals, expected {n}",
                d.group_id,
                d.sources.cols()
            )));
        }
        for i in 0..d.sources.rows() {
            for (s, v) in scores.iter_mut().zip(d.sources.row(i)) {
                *s = s.max(v.abs());
            }
        }
    }
    Ok(scores)
}

/// Folds per-signal values onto hidden units. With [`SignalMode::Both`] a
/// unit takes the larger of its gate-column and up-column values.
pub fn fold_to_units(per_signal: &[f64], mode: SignalMode) -> Result<Vec<f64>> {
    match mode {
        SignalMode::Both => {
            if !per_signal.len().is_multiple_of(2) {
                return Err(Error::Dimension(format!(
                    "{} signals cannot be split into gate and up halves",
                    per_signal.len()
                )));
            }
            let h = per_signal.len() / 2;
            Ok((0..h)
                .map(|i| per_signal[i].max(per_signal[h + i]))
                .collect())
        }
        _ => Ok(per_signal.to_vec()),
    }
}

/// Per-hidden-unit importance: the largest |standardized loading| the unit
/// receives in any component of any group.
pub fn neuron_scores(decs: &[SourceDecomposition], mode: SignalMode) -> Result<Vec<f64>> {
    fold_to_units(&signal_scores(decs)?, mode)
}

/// Number of units kept at pruning rate `p`: `round((1 − p)·d_hidden)`,
/// halves rounded up.
pub fn keep_count(d_hidden: usize, rate: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!(
            "pruning rate {rate} outside [0, 1)"
        )));
    }
    let exact = (1.0 - rate) * d_hidden as f64;
    // absorb representation error so that x.5 always rounds up
    let keep = (exact + 0.5 + 1e-9).floor() as usize;
    let keep = keep.min(d_hidden);
    if keep == 0 {
        return Err(Error::Argument(format!(
            "rate {rate} would prune every one of {d_hidden} units"
        )));
    }
    Ok(keep)
}

/// Indices of the `keep_count` highest scores, ties to the lower index,
/// returned in ascending order.
pub fn select_kept(scores: &[f64], rate: f64) -> Result<Vec<usize>> {
    let keep = keep_count(scores.len(), rate)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN importance score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Seed of the ICA run for one (layer, group) cell.
pub(crate) fn cell_seed(seed: RngSeed, layer: usize, group: usize) -> RngSeed {
    seed.derive(((layer as u64) << 32) | group as u64)
}
