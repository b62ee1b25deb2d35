// SPDX-License-Identifier: MIT OR Apache-2.0

use super::kernels::{causal_attention, linear, linear_f64, rms_norm, silu};
use super::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// MLP signals of one layer for one input sequence.
#[derive(Debug, Clone)]
pub struct CaptureRecord {
    pub layer: usize,
    /// `silu(gate_proj · x)`, tokens × d_hidden.
    pub gate_out: Matrix,
    /// `up_proj · x`, tokens × d_hidden.
    pub up_out: Matrix,
    /// Elementwise `gate_out ⊙ up_out` as fed to `down_proj`.
    pub product: Matrix,
}

/// Overrides the product activation of one hidden unit at every position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intervention {
    pub layer: usize,
    pub unit: usize,
    pub value: f32,
}

impl Intervention {
    pub fn ablate(layer: usize, unit: usize) -> Self {
        Intervention {
            layer,
            unit,
            value: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row-major `len × vocab_size`.
    pub logits: Vec<f32>,
    pub vocab_size: usize,
    pub captures: Option<Vec<CaptureRecord>>,
}

impl ForwardOutput {
    pub fn position(&self, t: usize) -> &[f32] {
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }
}

fn to_matrix(rows: usize, cols: usize, v: &[f32]) -> Matrix {
    Matrix::new(rows, cols, v.iter().map(|&x| f64::from(x)).collect()).expect("finite activations")
}

pub(crate) fn check_tokens(ckpt: &ModelCheckpoint, tokens: &[u32]) -> Result<()> {
    let cfg = &ckpt.config;
    if tokens.is_empty() {
        return Err(Error::Argument("empty token sequence".into()));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::Argument(format!(
            "sequence length {} exceeds context length {}",
            tokens.len(),
            cfg.context_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Argument(format!(
            "token {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Causal forward pass; with `capture` set, returns one [`CaptureRecord`] per layer.
pub fn forward(ckpt: &ModelCheckpoint, tokens: &[u32], capture: bool) -> Result<ForwardOutput> {
    forward_with(ckpt, tokens, capture, &[])
}

/// Forward pass with product-activation overrides applied before `down_proj`.
pub fn forward_with(
    ckpt: &ModelCheckpoint,
    tokens: &[u32],
    capture: bool,
    interventions: &[Intervention],
) -> Result<ForwardOutput> {
    check_tokens(ckpt, tokens)?;
    let cfg = &ckpt.config;
    let w = &ckpt.weights;
    for iv in interventions {
        if iv.layer >= cfg.n_layers || iv.unit >= cfg.hidden_size(iv.layer) {
            return Err(Error::Argument(format!(
                "intervention out of range: {iv:?}"
            )));
        }
    }
    let t = tokens.len();
    let d = cfg.d_model;

    let mut x = vec![0.0f32; t * d];
    for (p, &tok) in tokens.iter().enumerate() {
        let row = &mut x[p * d..(p + 1) * d];
        for ((o, e), q) in row
            .iter_mut()
            .zip(w.tok_emb.row(tok as usize))
            .zip(w.pos_emb.row(p))
        {
            *o = e + q;
        }
    }

    let mut captures = capture.then(|| Vec::with_capacity(cfg.n_layers));
    for (l, b) in w.layers.iter().enumerate() {
        let (h, _) = rms_norm(&x, d, &b.attn_norm.data);
        let q = linear(&h, t, &b.q_proj.data, d, d);
        let k = linear(&h, t, &b.k_proj.data, d, d);
        let v = linear(&h, t, &b.v_proj.data, d, d);
        let (att, _) = causal_attention(&q, &k, &v, t, d, cfg.n_heads);
        let o = linear(&att, t, &b.o_proj.data, d, d);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        let hid = b.d_hidden();
        let (h2, _) = rms_norm(&x, d, &b.mlp_norm.data);
        let mut gate = linear(&h2, t, &b.gate_proj.data, hid, d);
        let up = linear(&h2, t, &b.up_proj.data, hid, d);
        gate.iter_mut().for_each(|g| *g = silu(*g));
        let mut prod: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| g * u).collect();
        for iv in interventions.iter().filter(|iv| iv.layer == l) {
            for p in 0..t {
                prod[p * hid + iv.unit] = iv.value;
            }
        }
        let mut down = linear_f64(&prod, t, &b.down_proj.data, d, hid);
        if let Some(bias) = &b.down_bias {
            for p in 0..t {
                down[p * d..(p + 1) * d]
                    .iter_mut()
                    .zip(&bias.data)
                    .for_each(|(a, b)| *a += b);
            }
        }
        x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);

        if let Some(caps) = captures.as_mut() {
            caps.push(CaptureRecord {
                layer: l,
                gate_out: to_matrix(t, hid, &gate),
                up_out: to_matrix(t, hid, &up),
                product: to_matrix(t, hid, &prod),
            });
        }
    }

    let (hf, _) = rms_norm(&x, d, &w.final_norm.data);
    let logits = linear(&hf, t, &w.lm_head.data, cfg.vocab_size, d);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(ForwardOutput {
        logits,
        vocab_size: cfg.vocab_size,
        captures,
    })
}
