// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal trainer: next-token cross-entropy, hand-written backward pass,
//! AdamW with linear warmup and cosine decay.

use super::kernels::{causal_attention, gemm, linear, rms_norm, sigmoid, View};
use super::{ModelCheckpoint, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::RngSeed;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step; each spans `context_len + 1` tokens.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final rate as a fraction of the peak after cosine decay.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 3e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 50,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

/// Trains a freshly initialized model on random windows of `corpus`.
///
/// Training is single-threaded and fully determined by `seed`; `steps == 0`
/// returns the seeded initialization.
pub fn train(
    config: &ModelConfig,
    corpus: &[u32],
    seed: RngSeed,
    hyper: &TrainConfig,
) -> Result<ModelCheckpoint> {
    config.validate()?;
    if config.layer_d_hidden.is_some() {
        return Err(Error::Argument(
            "training starts from a uniform-width model".into(),
        ));
    }
    let window = config.context_len + 1;
    if corpus.len() < window {
        return Err(Error::Argument(format!(
            "corpus of {} tokens is smaller than one training window ({window})",
            corpus.len()
        )));
    }
    if let Some(&bad) = corpus.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Argument(format!(
            "corpus token {bad} outside vocabulary"
        )));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    let mut ckpt = ModelCheckpoint::init(config, seed.derive(0))?;
    if hyper.steps == 0 {
        return Ok(ckpt);
    }

    let mut rng = seed.derive(1).rng();
    let mut opt = AdamW::new(&ckpt.weights);
    let mut grads = ckpt.weights.zeros_like();
    let max_start = corpus.len() - window;
    for step in 0..hyper.steps {
        let starts: Vec<usize> = (0..hyper.batch_size)
            .map(|_| rng.gen_range(0..=max_start))
            .collect();
        let batch: Vec<&[u32]> = starts.iter().map(|&s| &corpus[s..s + window]).collect();
        zero(&mut grads);
        let loss = loss_and_grad(&ckpt.weights, config, &batch, &mut grads);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if hyper.grad_clip > 0.0 {
            clip(&mut grads, hyper.grad_clip);
        }
        opt.step(
            &mut ckpt.weights,
            &grads,
            hyper,
            hyper.learning_rate_at(step),
        );
        if hyper.log_every > 0 && (step % hyper.log_every == 0 || step + 1 == hyper.steps) {
            log::info!("step {step:>5}  loss {loss:.4}  ppl {:.3}", loss.exp());
        }
    }
    Ok(ckpt)
}

fn zero(g: &mut ModelWeights) {
    for t in g.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn clip(g: &mut ModelWeights, max_norm: f64) {
    let norm = g
        .tensors_mut()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in g.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }
}

struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl AdamW {
    fn new(w: &ModelWeights) -> Self {
        let sizes: Vec<usize> = w.named().iter().map(|(_, t)| t.numel()).collect();
        AdamW {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut ModelWeights, g: &ModelWeights, h: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t);
        let bc2 = 1.0 - h.beta2.powi(self.t);
        let grads: Vec<Vec<f32>> = g.named().iter().map(|(_, t)| t.data.clone()).collect();
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
        for (i, p) in w.tensors_mut().into_iter().enumerate() {
            // decay matrices only; skip norms and embeddings
            let decay = p.shape.len() == 2 && !names[i].ends_with("_emb");
            let wd = if decay {
                (lr * h.weight_decay) as f32
            } else {
                0.0
            };
            let (m, v, gr) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.data.len() {
                let gj = gr[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = f64::from(m[j]) / bc1;
                let vh = f64::from(v[j]) / bc2;
                let upd = (lr * mh / (vh.sqrt() + h.adam_eps)) as f32;
                p.data[j] -= upd + wd * p.data[j];
            }
        }
    }
}

struct BlockCache {
    x_in: Vec<f32>,
    inv1: Vec<f32>,
    h: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    att: Vec<f32>,
    x_mid: Vec<f32>,
    inv2: Vec<f32>,
    h2: Vec<f32>,
    gate_pre: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
    prod: Vec<f32>,
}

/// Mean next-token cross-entropy over the batch, accumulating its gradient
/// into `grads`. Each sequence supplies `len - 1` predictions.
pub(crate) fn loss_and_grad(
    w: &ModelWeights,
    cfg: &ModelConfig,
    batch: &[&[u32]],
    grads: &mut ModelWeights,
) -> f64 {
    let total: usize = batch.iter().map(|s| s.len() - 1).sum();
    let norm = 1.0 / total as f32;
    batch
        .iter()
        .map(|seq| sequence_loss_and_grad(w, cfg, seq, norm, grads))
        .sum::<f64>()
        / total as f64
}

fn sequence_loss_and_grad(
    w: &ModelWeights,
    cfg: &ModelConfig,
    seq: &[u32],
    norm: f32,
    g: &mut ModelWeights,
) -> f64 {
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let t = inputs.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let vocab = cfg.vocab_size;

    // forward
    let mut x = vec![0.0f32; t * d];
    for (p, &tok) in inputs.iter().enumerate() {
        for ((o, e), q) in x[p * d..(p + 1) * d]
            .iter_mut()
            .zip(w.tok_emb.row(tok as usize))
            .zip(w.pos_emb.row(p))
        {
            *o = e + q;
        }
    }
    let mut caches = Vec::with_capacity(w.layers.len());
    for b in &w.layers {
        let hid = b.d_hidden();
        let x_in = x.clone();
        let (h, inv1) = rms_norm(&x, d, &b.attn_norm.data);
        let q = linear(&h, t, &b.q_proj.data, d, d);
        let k = linear(&h, t, &b.k_proj.data, d, d);
        let v = linear(&h, t, &b.v_proj.data, d, d);
        let (att, probs) = causal_attention(&q, &k, &v, t, d, nh);
        let o = linear(&att, t, &b.o_proj.data, d, d);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let x_mid = x.clone();
        let (h2, inv2) = rms_norm(&x, d, &b.mlp_norm.data);
        let gate_pre = linear(&h2, t, &b.gate_proj.data, hid, d);
        let up = linear(&h2, t, &b.up_proj.data, hid, d);
        let act: Vec<f32> = gate_pre.iter().map(|&z| z * sigmoid(z)).collect();
        let prod: Vec<f32> = act.iter().zip(&up).map(|(a, u)| a * u).collect();
        let mut down = linear(&prod, t, &b.down_proj.data, d, hid);
        if let Some(bias) = &b.down_bias {
            for p in 0..t {
                down[p * d..(p + 1) * d]
                    .iter_mut()
                    .zip(&bias.data)
                    .for_each(|(a, b)| *a += b);
            }
        }
        x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        caches.push(BlockCache {
            x_in,
            inv1,
            h,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            inv2,
            h2,
            gate_pre,
            up,
            act,
            prod,
        });
    }
    let x_final = x;
    let (hf, inv_f) = rms_norm(&x_final, d, &w.final_norm.data);
    let mut dlogits = linear(&hf, t, &w.lm_head.data, vocab, d);

    // loss and dL/dlogits
    let mut loss = 0.0f64;
    for p in 0..t {
        let row = &mut dlogits[p * vocab..(p + 1) * vocab];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&z| f64::from(z - max).exp()).sum();
        let target = targets[p] as usize;
        loss += sum.ln() - f64::from(row[target] - max);
        for (j, z) in row.iter_mut().enumerate() {
            let prob = (f64::from(*z - max).exp() / sum) as f32;
            *z = (prob - if j == target { 1.0 } else { 0.0 }) * norm;
        }
    }

    // backward
    gemm(
        vocab,
        t,
        d,
        View::rm(&dlogits, vocab).t(),
        View::rm(&hf, d),
        1.0,
        &mut g.lm_head.data,
        0,
        d,
    );
    let mut dhf = vec![0.0f32; t * d];
    gemm(
        t,
        vocab,
        d,
        View::rm(&dlogits, vocab),
        View::rm(&w.lm_head.data, d),
        0.0,
        &mut dhf,
        0,
        d,
    );
    let mut dx = vec![0.0f32; t * d];
    rms_norm_backward(
        &x_final,
        &inv_f,
        &w.final_norm.data,
        &dhf,
        d,
        &mut g.final_norm.data,
        &mut dx,
    );

    for (l, b) in w.layers.iter().enumerate().rev() {
        let c = &caches[l];
        let gb = &mut g.layers[l];
        let hid = b.d_hidden();

        // MLP: x_out = x_mid + down(prod) (+ bias)
        if let Some(bias) = gb.down_bias.as_mut() {
            for p in 0..t {
                bias.data
                    .iter_mut()
                    .zip(&dx[p * d..(p + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
        }
        gemm(
            d,
            t,
            hid,
            View::rm(&dx, d).t(),
            View::rm(&c.prod, hid),
            1.0,
            &mut gb.down_proj.data,
            0,
            hid,
        );
        let mut dprod = vec![0.0f32; t * hid];
        gemm(
            t,
            d,
            hid,
            View::rm(&dx, d),
            View::rm(&b.down_proj.data, hid),
            0.0,
            &mut dprod,
            0,
            hid,
        );
        let mut dgate = vec![0.0f32; t * hid];
        let mut dup = vec![0.0f32; t * hid];
        for i in 0..t * hid {
            let z = c.gate_pre[i];
            let s = sigmoid(z);
            dup[i] = dprod[i] * c.act[i];
            dgate[i] = dprod[i] * c.up[i] * s * (1.0 + z * (1.0 - s));
        }
        gemm(
            hid,
            t,
            d,
            View::rm(&dgate, hid).t(),
            View::rm(&c.h2, d),
            1.0,
            &mut gb.gate_proj.data,
            0,
            d,
        );
        gemm(
            hid,
            t,
            d,
            View::rm(&dup, hid).t(),
            View::rm(&c.h2, d),
            1.0,
            &mut gb.up_proj.data,
            0,
            d,
        );
        let mut dh2 = vec![0.0f32; t * d];
        gemm(
            t,
            hid,
            d,
            View::rm(&dgate, hid),
            View::rm(&b.gate_proj.data, d),
            0.0,
            &mut dh2,
            0,
            d,
        );
        gemm(
            t,
            hid,
            d,
            View::rm(&dup, hid),
            View::rm(&b.up_proj.data, d),
            1.0,
            &mut dh2,
            0,
            d,
        );
        rms_norm_backward(
            &c.x_mid,
            &c.inv2,
            &b.mlp_norm.data,
            &dh2,
            d,
            &mut gb.mlp_norm.data,
            &mut dx,
        );

        // attention: x_mid = x_in + o_proj(att)
        gemm(
            d,
            t,
            d,
            View::rm(&dx, d).t(),
            View::rm(&c.att, d),
            1.0,
            &mut gb.o_proj.data,
            0,
            d,
        );
        let mut datt = vec![0.0f32; t * d];
        gemm(
            t,
            d,
            d,
            View::rm(&dx, d),
            View::rm(&b.o_proj.data, d),
            0.0,
            &mut datt,
            0,
            d,
        );
        let mut dq = vec![0.0f32; t * d];
        let mut dk = vec![0.0f32; t * d];
        let mut dv = vec![0.0f32; t * d];
        let scale = 1.0 / (dh as f32).sqrt();
        let mut ds = vec![0.0f32; t * t];
        for hd in 0..nh {
            let off = hd * dh;
            let p_off = hd * t * t;
            gemm(
                t,
                dh,
                t,
                View::rm(&datt, d).at(off),
                View::rm(&c.v, d).t().at(off),
                0.0,
                &mut ds,
                0,
                t,
            );
            gemm(
                t,
                t,
                dh,
                View::rm(&c.probs, t).at(p_off).t(),
                View::rm(&datt, d).at(off),
                0.0,
                &mut dv,
                off,
                d,
            );
            for i in 0..t {
                let prow = &c.probs[p_off + i * t..p_off + (i + 1) * t];
                let drow = &mut ds[i * t..(i + 1) * t];
                let dot: f32 = prow[..=i].iter().zip(&drow[..=i]).map(|(p, g)| p * g).sum();
                for j in 0..t {
                    drow[j] = if j <= i {
                        prow[j] * (drow[j] - dot) * scale
                    } else {
                        0.0
                    };
                }
            }
            gemm(
                t,
                t,
                dh,
                View::rm(&ds, t),
                View::rm(&c.k, d).at(off),
                0.0,
                &mut dq,
                off,
                d,
            );
            gemm(
                t,
                t,
                dh,
                View::rm(&ds, t).t(),
                View::rm(&c.q, d).at(off),
                0.0,
                &mut dk,
                off,
                d,
            );
        }
        for (dw, dy) in [
            (&mut gb.q_proj.data, &dq),
            (&mut gb.k_proj.data, &dk),
            (&mut gb.v_proj.data, &dv),
        ] {
            gemm(
                d,
                t,
                d,
                View::rm(dy, d).t(),
                View::rm(&c.h, d),
                1.0,
                dw,
                0,
                d,
            );
        }
        let mut dh = vec![0.0f32; t * d];
        gemm(
            t,
            d,
            d,
            View::rm(&dq, d),
            View::rm(&b.q_proj.data, d),
            0.0,
            &mut dh,
            0,
            d,
        );
        gemm(
            t,
            d,
            d,
            View::rm(&dk, d),
            View::rm(&b.k_proj.data, d),
            1.0,
            &mut dh,
            0,
            d,
        );
        gemm(
            t,
            d,
            d,
            View::rm(&dv, d),
            View::rm(&b.v_proj.data, d),
            1.0,
            &mut dh,
            0,
            d,
        );
        rms_norm_backward(
            &c.x_in,
            &c.inv1,
            &b.attn_norm.data,
            &dh,
            d,
            &mut gb.attn_norm.data,
            &mut dx,
        );
    }

    for (p, &tok) in inputs.iter().enumerate() {
        let src = &dx[p * d..(p + 1) * d];
        g.tok_emb
            .row_mut(tok as usize)
            .iter_mut()
            .zip(src)
            .for_each(|(a, b)| *a += b);
        g.pos_emb
            .row_mut(p)
            .iter_mut()
            .zip(src)
            .for_each(|(a, b)| *a += b);
    }
    loss
}

/// Backward of `y = x · inv_rms(x) · scale`; adds into `dscale` and `dx`.
fn rms_norm_backward(
    x: &[f32],
    inv: &[f32],
    scale: &[f32],
    dy: &[f32],
    d: usize,
    dscale: &mut [f32],
    dx: &mut [f32],
) {
    let t = x.len() / d;
    let mut dn = vec![0.0f32; d];
    for r in 0..t {
        let s = inv[r];
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut dot = 0.0f32;
        for i in 0..d {
            let n = xr[i] * s;
            dscale[i] += dyr[i] * n;
            dn[i] = dyr[i] * scale[i];
            dot += dn[i] * n;
        }
        dot /= d as f32;
        for (i, o) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o += s * (dn[i] - xr[i] * s * dot);
        }
    }
}
