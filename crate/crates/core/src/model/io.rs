// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint file format.
//!
//! ```text
//! "FBNP" | version: u32 LE | header_len: u32 LE | header JSON | payload
//! ```
//!
//! The header is compact JSON `{"config", "meta", "tensors": [{name, shape}]}`
//! with fields in fixed order. The payload is every tensor, in header order,
//! as little-endian `f32`.

use super::{expected_shapes, BlockWeights, ModelCheckpoint, ModelConfig, ModelWeights, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FBNP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn to_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let named = ckpt.weights.named();
    let header = Header {
        config: ckpt.config.clone(),
        meta: ckpt.meta.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let payload: usize = named.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(12 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint truncated before header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Format("checkpoint truncated inside header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    header.config.validate()?;

    let biases: Vec<bool> = (0..header.config.n_layers)
        .map(|l| {
            let name = format!("layers.{l}.mlp.down_bias");
            header.tensors.iter().any(|t| t.name == name)
        })
        .collect();
    let expected = expected_shapes(&header.config, &biases);
    if expected.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "header lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((en, es), t) in expected.iter().zip(&header.tensors) {
        if *en != t.name || *es != t.shape {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match expected {en} {es:?}",
                t.name, t.shape
            )));
        }
    }

    let payload = &body[hlen..];
    let needed: usize = expected
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != needed {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {needed}",
            payload.len()
        )));
    }
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(expected.len());
    let mut cursor = 0;
    for (name, shape) in expected {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = payload[cursor..cursor + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        cursor += 4 * n;
        tensors.insert(name, Tensor { shape, data });
    }
    let mut take = |name: &str| tensors.remove(name).expect("listed tensor");
    let cfg = header.config;
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let mut p = |s: &str| take(&format!("layers.{l}.{s}"));
            BlockWeights {
                attn_norm: p("attn_norm"),
                q_proj: p("attn.q_proj"),
                k_proj: p("attn.k_proj"),
                v_proj: p("attn.v_proj"),
                o_proj: p("attn.o_proj"),
                mlp_norm: p("mlp_norm"),
                gate_proj: p("mlp.gate_proj"),
                up_proj: p("mlp.up_proj"),
                down_proj: p("mlp.down_proj"),
                down_bias: biases[l].then(|| p("mlp.down_bias")),
            }
        })
        .collect();
    let weights = ModelWeights {
        tok_emb: take("tok_emb"),
        pos_emb: take("pos_emb"),
        layers,
        final_norm: take("final_norm"),
        lm_head: take("lm_head"),
    };
    let ckpt = ModelCheckpoint {
        config: cfg,
        weights,
        meta: header.meta,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    crate::artifact::write_atomic(path.as_ref(), &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        from_bytes(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngSeed;

    fn small() -> ModelCheckpoint {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_hidden: 12,
            vocab_size: 16,
            context_len: 6,
            ..ModelConfig::default()
        };
        ModelCheckpoint::init(&cfg, RngSeed(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ckpt = small();
        ckpt.meta.insert("config_digest".into(), "abc".into());
        ckpt.weights.layers[1].down_bias = Some(Tensor::filled(&[8], 0.25));
        let a = to_bytes(&ckpt).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(to_bytes(&back).unwrap(), a);
    }

    #[test]
    fn corrupted_inputs_are_errors() {
        let bytes = to_bytes(&small()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(from_bytes(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        let err = from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(&bytes[..20]).is_err());
        let mut garbled = bytes.clone();
        garbled[14] = b'!';
        assert!(from_bytes(&garbled).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_against_header() {
        let ckpt = small();
        let bytes = to_bytes(&ckpt).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        let tampered = header.replacen("[12,8]", "[11,8]", 1);
        assert_eq!(tampered.len(), header.len());
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(from_bytes(&out), Err(Error::Format(_))));
    }
}
