// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk forms of signal matrices and layer masks.
//!
//! Signal dumps use the checkpoint framing with their own magic:
//!
//! ```text
//! "FBNS" | version: u32 LE | header_len: u32 LE | header JSON | f32 LE payload
//! ```

use super::pipeline::FbnAnalysis;
use super::{select_kept, SignalMatrix, SignalMode};
use crate::artifact::{canonical_json, write_atomic};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const SIGNAL_MAGIC: &[u8; 4] = b"FBNS";
const SIGNAL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SignalHeader {
    layer: usize,
    mode: SignalMode,
    shape: [usize; 2],
    sample_id: usize,
}

pub fn signal_dump_bytes(s: &SignalMatrix) -> Result<Vec<u8>> {
    let header = SignalHeader {
        layer: s.layer,
        mode: s.mode,
        shape: [s.data.rows(), s.data.cols()],
        sample_id: s.sample_id,
    };
    let json = canonical_json(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * s.data.data().len());
    out.extend_from_slice(SIGNAL_MAGIC);
    out.extend_from_slice(&SIGNAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in s.data.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn parse_signal_dump(bytes: &[u8]) -> Result<SignalMatrix> {
    if bytes.len() < 12 || &bytes[..4] != SIGNAL_MAGIC {
        return Err(Error::Format("not a signal dump: bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SIGNAL_VERSION {
        return Err(Error::Format(format!(
            "unsupported signal dump version {version}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Format("signal dump truncated inside header".into()));
    }
    let h: SignalHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("bad signal dump header: {e}")))?;
    let payload = &body[hlen..];
    let n = h.shape[0] * h.shape[1];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "signal payload holds {} bytes, header implies {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(SignalMatrix {
        layer: h.layer,
        sample_id: h.sample_id,
        mode: h.mode,
        data: Matrix::new(h.shape[0], h.shape[1], data)?,
        z_scored: true,
    })
}

pub fn write_signal_dump(path: impl AsRef<Path>, s: &SignalMatrix) -> Result<()> {
    write_atomic(path.as_ref(), &signal_dump_bytes(s)?)
}

pub fn read_signal_dump(path: impl AsRef<Path>) -> Result<SignalMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_signal_dump(&bytes)
}

/// One layer of a mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMaskEntry {
    /// Hidden units inside at least one thresholded functional network.
    pub kept_indices: Vec<usize>,
    /// Per-unit importance scores.
    pub scores: Vec<f64>,
    pub tau: f64,
    pub k: usize,
    pub group_count: usize,
    pub converged_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub layers: BTreeMap<usize, LayerMaskEntry>,
    /// Config and input digests of the run that produced the masks.
    #[serde(default)]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl MaskFile {
    pub fn from_analysis(a: &FbnAnalysis) -> Self {
        let layers = a
            .layers
            .iter()
            .map(|l| {
                let entry = LayerMaskEntry {
                    kept_indices: l
                        .unit_mask
                        .iter()
                        .enumerate()
                        .filter_map(|(i, &m)| m.then_some(i))
                        .collect(),
                    scores: l.scores.clone(),
                    tau: l.threshold,
                    k: a.config.n_components,
                    group_count: l.group_count(),
                    converged_fraction: l.converged_fraction(),
                };
                (l.layer, entry)
            })
            .collect();
        MaskFile {
            layers,
            provenance: BTreeMap::new(),
        }
    }

    /// Per-layer unit scores, in layer order.
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.layers.values().map(|e| e.scores.clone()).collect()
    }

    /// Kept units per layer at pruning rate `rate`.
    pub fn kept_at_rate(&self, rate: f64) -> Result<Vec<Vec<usize>>> {
        self.layers
            .values()
            .map(|e| select_kept(&e.scores, rate))
            .collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        canonical_json(self)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: MaskFile = serde_json::from_slice(bytes)
            .map_err(|e| Error::Format(format!("bad mask file: {e}")))?;
        for (l, (&layer, e)) in m.layers.iter().enumerate() {
            if layer != l {
                return Err(Error::Format(format!("mask file skips layer {l}")));
            }
            if e.kept_indices.iter().any(|&i| i >= e.scores.len())
                || e.kept_indices.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::Format(format!(
                    "layer {layer}: kept_indices must be increasing and below {}",
                    e.scores.len()
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_json()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_dump_round_trip() {
        let s = SignalMatrix {
            layer: 3,
            sample_id: 17,
            mode: SignalMode::Both,
            data: Matrix::from_fn(4, 6, |i, j| i as f64 * 0.5 - j as f64 * 0.25),
            z_scored: true,
        };
        let bytes = signal_dump_bytes(&s).unwrap();
        assert_eq!(&bytes[..4], b"FBNS");
        let back = parse_signal_dump(&bytes).unwrap();
        assert_eq!(
            (back.layer, back.sample_id, back.mode),
            (3, 17, SignalMode::Both)
        );
        assert_eq!(back.data, s.data);
        assert!(parse_signal_dump(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(parse_signal_dump(&bad).is_err());
    }

    #[test]
    fn mask_file_round_trip_and_validation() {
        let entry = LayerMaskEntry {
            kept_indices: vec![0, 2],
            scores: vec![2.5, 0.3, 4.0],
            tau: 2.0,
            k: 8,
            group_count: 2,
            converged_fraction: 1.0,
        };
        let mut m = MaskFile {
            layers: BTreeMap::from([(0, entry.clone()), (1, entry)]),
            provenance: BTreeMap::from([("seed".into(), serde_json::json!(4))]),
        };
        let bytes = m.to_json().unwrap();
        assert_eq!(MaskFile::from_json(&bytes).unwrap(), m);
        assert_eq!(m.kept_at_rate(0.5).unwrap()[1], vec![0, 2]);
        m.layers.get_mut(&1).unwrap().kept_indices = vec![2, 0];
        assert!(MaskFile::from_json(&m.to_json().unwrap()).is_err());
        assert!(MaskFile::from_json(br#"{"layers":{},"extra":1}"#).is_err());
    }
}
