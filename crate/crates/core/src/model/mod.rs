// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale decoder-only transformer with gated (SiLU) MLPs.
//!
//! Layout follows the LLaMA family: pre-norm RMSNorm blocks, bias-free
//! projections, `down(silu(gate(x)) ⊙ up(x))` MLPs. Positions use a learned
//! embedding table. The only bias in the network is the optional
//! compensation term on `down_proj` that pruning can attach.

mod forward;
mod io;
pub(crate) mod kernels;
mod train;

pub use forward::{forward, forward_with, CaptureRecord, ForwardOutput, Intervention};
pub use io::{load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use train::{train, TrainConfig};

use crate::error::{Error, Result};
use crate::numerics::RngSeed;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Per-layer hidden widths once pruning has made them non-uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_d_hidden: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_hidden: 344,
            vocab_size: 256,
            context_len: 256,
            activation: Activation::Silu,
            layer_d_hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.context_len == 0
        {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_hidden == 0 {
            return bad("d_hidden must be at least 1".into());
        }
        if let Some(per) = &self.layer_d_hidden {
            if per.len() != self.n_layers || per.contains(&0) {
                return bad(format!(
                    "layer_d_hidden {per:?} must hold {} positive widths",
                    self.n_layers
                ));
            }
        }
        Ok(())
    }

    pub fn hidden_size(&self, layer: usize) -> usize {
        self.layer_d_hidden
            .as_ref()
            .map_or(self.d_hidden, |v| v[layer])
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        (0..self.n_layers).map(|l| self.hidden_size(l)).collect()
    }

    /// Records per-layer widths, collapsing back to the uniform form when
    /// every layer matches `d_hidden`.
    pub fn set_hidden_sizes(&mut self, sizes: Vec<usize>) {
        if sizes.iter().all(|&h| h == self.d_hidden) {
            self.layer_d_hidden = None;
        } else {
            self.layer_d_hidden = Some(sizes);
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Dense `f32` tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f32, rng: &mut impl rand::Rng) -> Self {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| dist.sample(rng))
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }
}

/// Weights of one transformer block. Projections are stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub mlp_norm: Tensor,
    pub gate_proj: Tensor,
    pub up_proj: Tensor,
    pub down_proj: Tensor,
    pub down_bias: Option<Tensor>,
}

impl BlockWeights {
    pub fn d_hidden(&self) -> usize {
        self.gate_proj.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<BlockWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl ModelWeights {
    /// Named tensors in canonical on-disk order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("attn_norm"), &b.attn_norm));
            out.push((p("attn.q_proj"), &b.q_proj));
            out.push((p("attn.k_proj"), &b.k_proj));
            out.push((p("attn.v_proj"), &b.v_proj));
            out.push((p("attn.o_proj"), &b.o_proj));
            out.push((p("mlp_norm"), &b.mlp_norm));
            out.push((p("mlp.gate_proj"), &b.gate_proj));
            out.push((p("mlp.up_proj"), &b.up_proj));
            out.push((p("mlp.down_proj"), &b.down_proj));
            if let Some(bias) = &b.down_bias {
                out.push((p("mlp.down_bias"), bias));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable tensors in the same order as [`ModelWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.layers {
            out.push(&mut b.attn_norm);
            out.push(&mut b.q_proj);
            out.push(&mut b.k_proj);
            out.push(&mut b.v_proj);
            out.push(&mut b.o_proj);
            out.push(&mut b.mlp_norm);
            out.push(&mut b.gate_proj);
            out.push(&mut b.up_proj);
            out.push(&mut b.down_proj);
            if let Some(bias) = &mut b.down_bias {
                out.push(bias);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(&t.shape);
        ModelWeights {
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|b| BlockWeights {
                    attn_norm: z(&b.attn_norm),
                    q_proj: z(&b.q_proj),
                    k_proj: z(&b.k_proj),
                    v_proj: z(&b.v_proj),
                    o_proj: z(&b.o_proj),
                    mlp_norm: z(&b.mlp_norm),
                    gate_proj: z(&b.gate_proj),
                    up_proj: z(&b.up_proj),
                    down_proj: z(&b.down_proj),
                    down_bias: b.down_bias.as_ref().map(z),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            lm_head: z(&self.lm_head),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Expected tensor table for a configuration, with `down_bias` flags per layer.
pub(crate) fn expected_shapes(cfg: &ModelConfig, biases: &[bool]) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d]),
        ("pos_emb".to_string(), vec![cfg.context_len, d]),
    ];
    for l in 0..cfg.n_layers {
        let h = cfg.hidden_size(l);
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push((p("attn_norm"), vec![d]));
        for name in ["attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj"] {
            out.push((p(name), vec![d, d]));
        }
        out.push((p("mlp_norm"), vec![d]));
        out.push((p("mlp.gate_proj"), vec![h, d]));
        out.push((p("mlp.up_proj"), vec![h, d]));
        out.push((p("mlp.down_proj"), vec![d, h]));
        if biases.get(l).copied().unwrap_or(false) {
            out.push((p("mlp.down_bias"), vec![d]));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![cfg.vocab_size, d]));
    out
}

/// Architecture, weights, and free-form provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    /// Provenance entries (config and input digests) carried into the file header.
    pub meta: BTreeMap<String, String>,
}

impl ModelCheckpoint {
    /// Seeded random initialization: N(0, 0.02) projections and embeddings,
    /// residual-output projections scaled by `1/sqrt(2·n_layers)`, unit norms.
    pub fn init(config: &ModelConfig, seed: RngSeed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.rng();
        let d = config.d_model;
        let std = 0.02f32;
        let resid_std = std / ((2 * config.n_layers) as f32).sqrt();
        let tok_emb = Tensor::normal(&[config.vocab_size, d], std, &mut rng);
        let pos_emb = Tensor::normal(&[config.context_len, d], std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|l| {
                let h = config.hidden_size(l);
                BlockWeights {
                    attn_norm: Tensor::filled(&[d], 1.0),
                    q_proj: Tensor::normal(&[d, d], std, &mut rng),
                    k_proj: Tensor::normal(&[d, d], std, &mut rng),
                    v_proj: Tensor::normal(&[d, d], std, &mut rng),
                    o_proj: Tensor::normal(&[d, d], resid_std, &mut rng),
                    mlp_norm: Tensor::filled(&[d], 1.0),
                    gate_proj: Tensor::normal(&[h, d], std, &mut rng),
                    up_proj: Tensor::normal(&[h, d], std, &mut rng),
                    down_proj: Tensor::normal(&[d, h], resid_std, &mut rng),
                    down_bias: None,
                }
            })
            .collect();
        let lm_head = Tensor::normal(&[config.vocab_size, d], std, &mut rng);
        Ok(ModelCheckpoint {
            config: config.clone(),
            weights: ModelWeights {
                tok_emb,
                pos_emb,
                layers,
                final_norm: Tensor::filled(&[d], 1.0),
                lm_head,
            },
            meta: BTreeMap::new(),
        })
    }

    /// Checks every tensor against the shape implied by the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.weights.layers.len() != self.config.n_layers {
            return Err(Error::Dimension(format!(
                "config has {} layers, weights have {}",
                self.config.n_layers,
                self.weights.layers.len()
            )));
        }
        let biases: Vec<bool> = self
            .weights
            .layers
            .iter()
            .map(|b| b.down_bias.is_some())
            .collect();
        let expected = expected_shapes(&self.config, &biases);
        let actual = self.weights.named();
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an || *es != at.shape || at.numel() != es.iter().product::<usize>() {
                return Err(Error::Dimension(format!(
                    "tensor {an} has shape {:?}, expected {en} {es:?}",
                    at.shape
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        let bytes = io::to_bytes(self).expect("validated checkpoint serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }
}
