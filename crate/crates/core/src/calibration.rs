// SPDX-License-Identifier: MIT OR Apache-2.0

//! Calibration corpus ingestion and grouping.
//!
//! Text is tokenized byte-wise. Samples are non-overlapping windows drawn at
//! seeded random offsets; groups are disjoint, equally sized subsets of the
//! samples, one per decomposition run.

use crate::artifact::{canonical_json, sha256_hex};
use crate::error::{Error, Result};
use crate::numerics::RngSeed;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Byte-level tokenization.
pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Splits a corpus into a leading training part and a trailing held-out part.
pub fn split_heldout(bytes: &[u8], heldout_fraction: f64) -> Result<(&[u8], &[u8])> {
    if !(0.0..1.0).contains(&heldout_fraction) {
        return Err(Error::Argument(format!(
            "held-out fraction {heldout_fraction} outside [0, 1)"
        )));
    }
    let cut = bytes.len() - (bytes.len() as f64 * heldout_fraction).round() as usize;
    Ok(bytes.split_at(cut))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub samples: Vec<Vec<u32>>,
    /// Byte offset of each sample in the source, ascending.
    pub offsets: Vec<usize>,
    pub context_len: usize,
    pub source_digest: String,
    pub seed: RngSeed,
}

/// Audit record from which a calibration set can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationManifest {
    pub source_digest: String,
    pub seed: RngSeed,
    pub context_len: usize,
    pub offsets: Vec<usize>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn manifest(&self) -> CalibrationManifest {
        CalibrationManifest {
            source_digest: self.source_digest.clone(),
            seed: self.seed,
            context_len: self.context_len,
            offsets: self.offsets.clone(),
        }
    }

    pub fn manifest_json(&self) -> Result<Vec<u8>> {
        canonical_json(&self.manifest())
    }

    /// Rebuilds a set from its manifest, checking the source digest.
    pub fn from_manifest(m: &CalibrationManifest, source: &[u8]) -> Result<Self> {
        let digest = sha256_hex(source);
        if digest != m.source_digest {
            return Err(Error::Format(format!(
                "calibration source digest {digest} does not match manifest {}",
                m.source_digest
            )));
        }
        let samples = m
            .offsets
            .iter()
            .map(|&o| {
                source
                    .get(o..o + m.context_len)
                    .map(tokenize)
                    .ok_or_else(|| Error::Format(format!("offset {o} outside source")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CalibrationSet {
            samples,
            offsets: m.offsets.clone(),
            context_len: m.context_len,
            source_digest: digest,
            seed: m.seed,
        })
    }

    /// The first `n` samples as a new set.
    pub fn truncated(&self, n: usize) -> CalibrationSet {
        let n = n.min(self.len());
        CalibrationSet {
            samples: self.samples[..n].to_vec(),
            offsets: self.offsets[..n].to_vec(),
            ..self.clone()
        }
    }
}

/// Draws `n_samples` non-overlapping windows of `context_len` bytes.
///
/// The free space `len − n·context_len` is split into `n + 1` gaps whose
/// sizes come from sorted uniform draws, so every admissible placement is
/// reachable and windows never overlap.
pub fn ingest_bytes(
    bytes: &[u8],
    context_len: usize,
    n_samples: usize,
    seed: RngSeed,
) -> Result<CalibrationSet> {
    if n_samples == 0 {
        return Err(Error::Argument(
            "calibration set must hold at least one sample".into(),
        ));
    }
    if context_len == 0 {
        return Err(Error::Argument("context_len must be positive".into()));
    }
    let needed = n_samples
        .checked_mul(context_len)
        .ok_or_else(|| Error::Argument("calibration size overflows".into()))?;
    if bytes.len() < needed {
        return Err(Error::Argument(format!(
            "corpus of {} bytes cannot hold {n_samples} windows of {context_len}",
            bytes.len()
        )));
    }
    let slack = bytes.len() - needed;
    let mut rng = seed.rng();
    let mut gaps: Vec<usize> = (0..n_samples).map(|_| rng.gen_range(0..=slack)).collect();
    gaps.sort_unstable();
    let offsets: Vec<usize> = gaps
        .iter()
        .enumerate()
        .map(|(i, g)| g + i * context_len)
        .collect();
    let samples = offsets
        .iter()
        .map(|&o| tokenize(&bytes[o..o + context_len]))
        .collect();
    Ok(CalibrationSet {
        samples,
        offsets,
        context_len,
        source_digest: sha256_hex(bytes),
        seed,
    })
}

pub fn ingest(
    path: impl AsRef<Path>,
    context_len: usize,
    n_samples: usize,
    seed: RngSeed,
) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ingest_bytes(&bytes, context_len, n_samples, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub group_size: usize,
    pub n_groups: usize,
    /// Disjoint sample-index lists, each of length `group_size`.
    pub assignment: Vec<Vec<usize>>,
    /// Samples left out because they do not fill a whole group.
    pub leftover: Vec<usize>,
}

/// Partitions the samples into `floor(n / group_size)` groups after a shuffle
/// seeded from the set's own seed.
pub fn plan_groups(set: &CalibrationSet, group_size: usize) -> Result<GroupPlan> {
    plan_groups_seeded(set.len(), group_size, set.seed.derive(0x6772_6f75))
}

/// Partitions `n_samples` indices into groups using an explicit shuffle seed.
pub fn plan_groups_seeded(n_samples: usize, group_size: usize, seed: RngSeed) -> Result<GroupPlan> {
    if group_size == 0 {
        return Err(Error::Argument("group_size must be positive".into()));
    }
    if group_size > n_samples {
        return Err(Error::Argument(format!(
            "group_size {group_size} exceeds the {n_samples} available samples"
        )));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut seed.rng());
    let n_groups = n_samples / group_size;
    let assignment: Vec<Vec<usize>> = order.chunks_exact(group_size).map(|c| c.to_vec()).collect();
    let leftover = order[n_groups * group_size..].to_vec();
    if !leftover.is_empty() {
        log::info!("{} calibration samples left ungrouped", leftover.len());
    }
    Ok(GroupPlan {
        group_size,
        n_groups,
        assignment,
        leftover,
    })
}
