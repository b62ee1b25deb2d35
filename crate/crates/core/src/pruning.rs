// SPDX-License-Identifier: MIT OR Apache-2.0

//! Structured pruning of MLP hidden units.
//!
//! A [`PruningPlan`] lists the kept units of every layer. Applying it slices
//! `gate_proj`/`up_proj` rows and `down_proj` columns, so the result is a
//! genuinely smaller checkpoint. An optional compensation bias restores the
//! removed units' mean contribution.

use crate::artifact::{canonical_json, write_atomic};
use crate::error::{Error, Result};
use crate::fbn::{keep_count, select_kept};
use crate::model::{forward, BlockWeights, ModelCheckpoint, Tensor};
use crate::numerics::RngSeed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Canica,
    Random,
    Magnitude,
    Fluctuation,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Canica,
        Method::Random,
        Method::Magnitude,
        Method::Fluctuation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Canica => "canica",
            Method::Random => "random",
            Method::Magnitude => "magnitude",
            Method::Fluctuation => "fluctuation",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown pruning method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub rate: f64,
    pub method: Method,
    pub seed: RngSeed,
    /// Sorted kept unit indices, one list per layer.
    pub per_layer_kept: Vec<Vec<usize>>,
    pub compensation: bool,
    /// `d_model` bias per layer; present once compensation was computed.
    pub per_layer_bias: Option<Vec<Vec<f64>>>,
}

/// Serialized form of a plan. Bias vectors live in the pruned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub method: Method,
    pub rate: f64,
    pub seed: RngSeed,
    pub per_layer_kept: Vec<Vec<usize>>,
    pub has_bias: bool,
    #[serde(default)]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl PruningPlan {
    pub fn to_file(&self) -> PlanFile {
        PlanFile {
            method: self.method,
            rate: self.rate,
            seed: self.seed,
            per_layer_kept: self.per_layer_kept.clone(),
            has_bias: self.compensation,
            provenance: BTreeMap::new(),
        }
    }

    /// Rebuilds a plan from its file; compensation must be recomputed.
    pub fn from_file(f: &PlanFile) -> Self {
        PruningPlan {
            rate: f.rate,
            method: f.method,
            seed: f.seed,
            per_layer_kept: f.per_layer_kept.clone(),
            compensation: f.has_bias,
            per_layer_bias: None,
        }
    }

    /// Checks the plan against a checkpoint's layer widths.
    pub fn validate(&self, ckpt: &ModelCheckpoint) -> Result<()> {
        let widths = ckpt.config.hidden_sizes();
        if self.per_layer_kept.len() != widths.len() {
            return Err(Error::Dimension(format!(
                "plan covers {} layers, model has {}",
                self.per_layer_kept.len(),
                widths.len()
            )));
        }
        for (l, (kept, &d)) in self.per_layer_kept.iter().zip(&widths).enumerate() {
            check_kept(l, kept, d)?;
        }
        if let Some(bias) = &self.per_layer_bias {
            let dm = ckpt.config.d_model;
            if bias.len() != widths.len() || bias.iter().any(|b| b.len() != dm) {
                return Err(Error::Dimension(format!(
                    "compensation bias must hold {} vectors of length {dm}",
                    widths.len()
                )));
            }
        }
        Ok(())
    }

    /// Units removed from `layer`, ascending.
    pub fn pruned(&self, layer: usize, d_hidden: usize) -> Vec<usize> {
        let kept = &self.per_layer_kept[layer];
        let mut it = kept.iter().peekable();
        (0..d_hidden)
            .filter(|i| {
                if it.peek() == Some(&i) {
                    it.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    pub fn save(
        &self,
        path: impl AsRef<Path>,
        provenance: BTreeMap<String, serde_json::Value>,
    ) -> Result<()> {
        let mut f = self.to_file();
        f.provenance = provenance;
        write_atomic(path.as_ref(), &canonical_json(&f)?)
    }
}

impl PlanFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("bad plan file: {e}")))
    }
}

fn check_kept(layer: usize, kept: &[usize], d_hidden: usize) -> Result<()> {
    if let Some(&bad) = kept.iter().find(|&&i| i >= d_hidden) {
        return Err(Error::Argument(format!(
            "layer {layer}: kept index {bad} out of range for width {d_hidden}"
        )));
    }
    if let Some(w) = kept.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!(
            "layer {layer}: kept indices must be strictly increasing (duplicate or unsorted at {})",
            w[1]
        )));
    }
    if kept.is_empty() {
        return Err(Error::Argument(format!("layer {layer}: no units kept")));
    }
    Ok(())
}

/// Calibration moments of each layer's gate ⊙ up activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub mean_product: Vec<Vec<f64>>,
    /// Population variance over all calibration tokens.
    pub variance_product: Vec<Vec<f64>>,
    pub token_count: usize,
}

/// Per-sample two-pass moments merged across samples with Chan's update.
pub fn collect_stats(ckpt: &ModelCheckpoint, samples: &[Vec<u32>]) -> Result<ActivationStats> {
    if samples.is_empty() {
        return Err(Error::Argument(
            "activation statistics need at least one sample".into(),
        ));
    }
    let widths = ckpt.config.hidden_sizes();
    let mut mean: Vec<Vec<f64>> = widths.iter().map(|&h| vec![0.0; h]).collect();
    let mut m2: Vec<Vec<f64>> = widths.iter().map(|&h| vec![0.0; h]).collect();
    let mut count = 0usize;
    for s in samples {
        let out = forward(ckpt, s, true)?;
        let nb = s.len() as f64;
        let na = count as f64;
        let n = na + nb;
        for rec in out.captures.expect("capture requested") {
            let p = &rec.product;
            let (mu, m) = (&mut mean[rec.layer], &mut m2[rec.layer]);
            for j in 0..p.cols() {
                let col = p.column(j);
                let mb = col.iter().sum::<f64>() / nb;
                let m2b: f64 = col.iter().map(|v| (v - mb) * (v - mb)).sum();
                let delta = mb - mu[j];
                mu[j] += delta * nb / n;
                m[j] += m2b + delta * delta * na * nb / n;
            }
        }
        count += s.len();
    }
    let variance = m2
        .into_iter()
        .map(|v| v.into_iter().map(|x| (x / count as f64).max(0.0)).collect())
        .collect();
    Ok(ActivationStats {
        mean_product: mean,
        variance_product: variance,
        token_count: count,
    })
}

/// Inputs a method may draw on when building a plan.
#[derive(Debug, Clone, Copy)]
pub struct PlanInputs<'a> {
    pub ckpt: &'a ModelCheckpoint,
    /// Functional-network unit scores, one vector per layer.
    pub fbn_scores: Option<&'a [Vec<f64>]>,
    pub stats: Option<&'a ActivationStats>,
}

fn row_norm(t: &Tensor, i: usize) -> f64 {
    t.row(i)
        .iter()
        .map(|&v| f64::from(v).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn col_norms_sq(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0f64; t.cols()];
    for r in 0..t.rows() {
        for (o, &v) in out.iter_mut().zip(t.row(r)) {
            *o += f64::from(v).powi(2);
        }
    }
    out
}

/// `‖gate row i‖·‖up row i‖·‖down column i‖` for every unit of a block.
pub fn magnitude_scores(b: &BlockWeights) -> Vec<f64> {
    let down = col_norms_sq(&b.down_proj);
    (0..b.d_hidden())
        .map(|i| row_norm(&b.gate_proj, i) * row_norm(&b.up_proj, i) * down[i].sqrt())
        .collect()
}

/// `Var[gate ⊙ up]_i · ‖down column i‖²`.
pub fn fluctuation_scores(b: &BlockWeights, variance: &[f64]) -> Result<Vec<f64>> {
    if variance.len() != b.d_hidden() {
        return Err(Error::Dimension(format!(
            "variance covers {} units, layer has {}",
            variance.len(),
            b.d_hidden()
        )));
    }
    let down = col_norms_sq(&b.down_proj);
    Ok(variance.iter().zip(&down).map(|(v, d)| v * d).collect())
}

pub fn build_plan(
    method: Method,
    inputs: &PlanInputs<'_>,
    rate: f64,
    seed: RngSeed,
) -> Result<PruningPlan> {
    let ckpt = inputs.ckpt;
    let widths = ckpt.config.hidden_sizes();
    let per_layer_kept = match method {
        Method::Canica => {
            let scores = inputs.fbn_scores.ok_or_else(|| {
                Error::Argument("canica plan needs functional-network scores".into())
            })?;
            if scores.len() != widths.len() {
                return Err(Error::Dimension(format!(
                    "scores cover {} layers, model has {}",
                    scores.len(),
                    widths.len()
                )));
            }
            scores
                .iter()
                .zip(&widths)
                .map(|(s, &d)| {
                    if s.len() != d {
                        return Err(Error::Dimension(format!(
                            "{} scores for a layer of width {d}",
                            s.len()
                        )));
                    }
                    select_kept(s, rate)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Method::Random => widths
            .iter()
            .enumerate()
            .map(|(l, &d)| {
                let keep = keep_count(d, rate)?;
                let mut rng = seed.derive(l as u64).rng();
                let mut kept = rand::seq::index::sample(&mut rng, d, keep).into_vec();
                kept.sort_unstable();
                Ok(kept)
            })
            .collect::<Result<Vec<_>>>()?,
        Method::Magnitude => ckpt
            .weights
            .layers
            .iter()
            .map(|b| select_kept(&magnitude_scores(b), rate))
            .collect::<Result<Vec<_>>>()?,
        Method::Fluctuation => {
            let stats = inputs.stats.ok_or_else(|| {
                Error::Argument("fluctuation plan needs activation statistics".into())
            })?;
            if stats.variance_product.len() != widths.len() {
                return Err(Error::Dimension(
                    "statistics do not cover every layer".into(),
                ));
            }
            ckpt.weights
                .layers
                .iter()
                .zip(&stats.variance_product)
                .map(|(b, v)| select_kept(&fluctuation_scores(b, v)?, rate))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(PruningPlan {
        rate,
        method,
        seed,
        per_layer_kept,
        compensation: false,
        per_layer_bias: None,
    })
}

/// Bias restoring the pruned units' mean contribution:
/// `Σ_{j pruned} mean_j · down_proj[:, j]` for every layer.
pub fn compute_compensation(
    ckpt: &ModelCheckpoint,
    plan: &PruningPlan,
    stats: &ActivationStats,
) -> Result<Vec<Vec<f64>>> {
    plan.validate(ckpt)?;
    let widths = ckpt.config.hidden_sizes();
    if stats.mean_product.len() != widths.len()
        || stats
            .mean_product
            .iter()
            .zip(&widths)
            .any(|(m, &d)| m.len() != d)
    {
        return Err(Error::Dimension(
            "statistics do not match the model's layer widths".into(),
        ));
    }
    let dm = ckpt.config.d_model;
    Ok(ckpt
        .weights
        .layers
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let mut bias = vec![0.0f64; dm];
            for j in plan.pruned(l, widths[l]) {
                let mu = stats.mean_product[l][j];
                for (r, o) in bias.iter_mut().enumerate() {
                    *o += mu * f64::from(b.down_proj.data[r * widths[l] + j]);
                }
            }
            bias
        })
        .collect())
}

/// Computes and attaches the compensation bias.
pub fn with_compensation(
    ckpt: &ModelCheckpoint,
    mut plan: PruningPlan,
    stats: &ActivationStats,
) -> Result<PruningPlan> {
    plan.per_layer_bias = Some(compute_compensation(ckpt, &plan, stats)?);
    plan.compensation = true;
    Ok(plan)
}

/// Keeps the given hidden units of one block.
pub fn slice_block(b: &BlockWeights, kept: &[usize]) -> Result<BlockWeights> {
    let d = b.d_hidden();
    check_kept(0, kept, d)?;
    let dm = b.down_proj.rows();
    let rows = |t: &Tensor| {
        let cols = t.cols();
        let mut data = Vec::with_capacity(kept.len() * cols);
        for &i in kept {
            data.extend_from_slice(t.row(i));
        }
        Tensor {
            shape: vec![kept.len(), cols],
            data,
        }
    };
    let mut down = Vec::with_capacity(dm * kept.len());
    for r in 0..dm {
        let row = b.down_proj.row(r);
        down.extend(kept.iter().map(|&j| row[j]));
    }
    Ok(BlockWeights {
        gate_proj: rows(&b.gate_proj),
        up_proj: rows(&b.up_proj),
        down_proj: Tensor {
            shape: vec![dm, kept.len()],
            data: down,
        },
        ..b.clone()
    })
}

/// Builds the pruned checkpoint. Layers that lose no units are copied
/// unchanged, so an identity plan reproduces the input exactly.
pub fn apply_plan(ckpt: &ModelCheckpoint, plan: &PruningPlan) -> Result<ModelCheckpoint> {
    plan.validate(ckpt)?;
    if plan.compensation && plan.per_layer_bias.is_none() {
        return Err(Error::Argument(
            "plan requests compensation but carries no bias; compute it first".into(),
        ));
    }
    let mut out = ckpt.clone();
    for (l, b) in out.weights.layers.iter_mut().enumerate() {
        let kept = &plan.per_layer_kept[l];
        if kept.len() == b.d_hidden() {
            continue;
        }
        let mut sliced = slice_block(b, kept)?;
        if let Some(bias) = plan.per_layer_bias.as_ref().map(|v| &v[l]) {
            let t = sliced
                .down_bias
                .get_or_insert_with(|| Tensor::zeros(&[bias.len()]));
            t.data
                .iter_mut()
                .zip(bias)
                .for_each(|(o, v)| *o = (f64::from(*o) + v) as f32);
        }
        *b = sliced;
    }
    let sizes = out
        .weights
        .layers
        .iter()
        .map(BlockWeights::d_hidden)
        .collect();
    out.config.set_hidden_sizes(sizes);
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_with, Intervention, ModelConfig};
    use proptest::prelude::*;

    fn small() -> ModelCheckpoint {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_hidden: 10,
            vocab_size: 16,
            context_len: 6,
            ..ModelConfig::default()
        };
        ModelCheckpoint::init(&cfg, RngSeed(9)).unwrap()
    }

    fn inputs(c: &ModelCheckpoint) -> PlanInputs<'_> {
        PlanInputs {
            ckpt: c,
            fbn_scores: None,
            stats: None,
        }
    }

    #[test]
    fn random_identity_and_seeding() {
        let c = small();
        let p = build_plan(Method::Random, &inputs(&c), 0.0, RngSeed(1)).unwrap();
        assert!(p
            .per_layer_kept
            .iter()
            .all(|k| *k == (0..10).collect::<Vec<_>>()));
        let a = build_plan(Method::Random, &inputs(&c), 0.3, RngSeed(1)).unwrap();
        let b = build_plan(Method::Random, &inputs(&c), 0.3, RngSeed(1)).unwrap();
        let d = build_plan(Method::Random, &inputs(&c), 0.3, RngSeed(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.per_layer_kept, d.per_layer_kept);
        assert!(a.per_layer_kept.iter().all(|k| k.len() == 7));
    }

    #[test]
    fn magnitude_prunes_dead_unit_first() {
        let mut c = small();
        let b = &mut c.weights.layers[0];
        b.gate_proj.row_mut(7).fill(0.0);
        b.up_proj.row_mut(7).fill(0.0);
        for r in 0..8 {
            b.down_proj.data[r * 10 + 7] = 0.0;
        }
        let p = build_plan(Method::Magnitude, &inputs(&c), 0.1, RngSeed(0)).unwrap();
        assert!(!p.per_layer_kept[0].contains(&7));
        assert_eq!(p.per_layer_kept[0].len(), 9);
    }

    #[test]
    fn missing_inputs_are_errors() {
        let c = small();
        assert!(build_plan(Method::Canica, &inputs(&c), 0.2, RngSeed(0)).is_err());
        assert!(build_plan(Method::Fluctuation, &inputs(&c), 0.2, RngSeed(0)).is_err());
        let short = vec![vec![1.0; 10]];
        let i = PlanInputs {
            fbn_scores: Some(&short),
            ..inputs(&c)
        };
        assert!(build_plan(Method::Canica, &i, 0.2, RngSeed(0)).is_err());
    }

    #[test]
    fn single_token_stats() {
        let c = small();
        let s = collect_stats(&c, &[vec![3]]).unwrap();
        assert_eq!(s.token_count, 1);
        let out = forward(&c, &[3], true).unwrap();
        let cap = &out.captures.unwrap()[1];
        assert_eq!(s.mean_product[1][4], cap.product.get(0, 4));
        assert!(s.variance_product.iter().flatten().all(|&v| v == 0.0));
        assert!(collect_stats(&c, &[]).is_err());
    }

    #[test]
    fn shapes_after_pruning() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 128,
            n_heads: 4,
            d_hidden: 344,
            vocab_size: 32,
            context_len: 4,
            ..ModelConfig::default()
        };
        let c = ModelCheckpoint::init(&cfg, RngSeed(1)).unwrap();
        let p = build_plan(Method::Magnitude, &inputs(&c), 0.2, RngSeed(0)).unwrap();
        let pruned = apply_plan(&c, &p).unwrap();
        let b = &pruned.weights.layers[0];
        assert_eq!(b.gate_proj.shape, vec![275, 128]);
        assert_eq!(b.up_proj.shape, vec![275, 128]);
        assert_eq!(b.down_proj.shape, vec![128, 275]);
        assert_eq!(pruned.config.hidden_size(0), 275);
        assert!(pruned.parameter_count() < c.parameter_count());
    }

    #[test]
    fn identity_plan_is_byte_identical() {
        let c = small();
        let p = build_plan(Method::Random, &inputs(&c), 0.0, RngSeed(3)).unwrap();
        let out = apply_plan(&c, &p).unwrap();
        assert_eq!(out.to_bytes().unwrap(), c.to_bytes().unwrap());
        let stats = collect_stats(&c, &[vec![1, 2, 3]]).unwrap();
        let comp = with_compensation(&c, p, &stats).unwrap();
        assert!(comp
            .per_layer_bias
            .as_ref()
            .unwrap()
            .iter()
            .flatten()
            .all(|&v| v == 0.0));
        assert_eq!(
            apply_plan(&c, &comp).unwrap().to_bytes().unwrap(),
            c.to_bytes().unwrap()
        );
    }

    #[test]
    fn bad_plans_rejected() {
        let c = small();
        let mut p = build_plan(Method::Random, &inputs(&c), 0.2, RngSeed(3)).unwrap();
        p.per_layer_kept[0][1] = p.per_layer_kept[0][0];
        assert!(apply_plan(&c, &p).is_err());
        p.per_layer_kept[0] = vec![0, 10];
        assert!(apply_plan(&c, &p).is_err());
        p.per_layer_kept.pop();
        assert!(apply_plan(&c, &p).is_err());
    }

    #[test]
    fn constant_unit_compensation_is_exact() {
        // unit 4 of layer 1 held at a constant through an intervention
        let c = small();
        let mut plan = build_plan(Method::Random, &inputs(&c), 0.0, RngSeed(0)).unwrap();
        plan.per_layer_kept[1].retain(|&i| i != 4);
        let value = 0.75f32;
        let mut stats = collect_stats(&c, &[vec![1, 2]]).unwrap();
        stats.mean_product[1][4] = f64::from(value);
        let plan = with_compensation(&c, plan, &stats).unwrap();
        let pruned = apply_plan(&c, &plan).unwrap();
        let toks = [5u32, 1, 9, 2, 2, 7];
        let full = forward_with(
            &c,
            &toks,
            false,
            &[Intervention {
                layer: 1,
                unit: 4,
                value,
            }],
        )
        .unwrap();
        let got = forward(&pruned, &toks, false).unwrap();
        let diff = full
            .logits
            .iter()
            .zip(&got.logits)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn plan_file_round_trip() {
        let c = small();
        let p = build_plan(Method::Random, &inputs(&c), 0.2, RngSeed(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        p.save(&path, BTreeMap::new()).unwrap();
        let back = PruningPlan::from_file(&PlanFile::load(&path).unwrap());
        assert_eq!(back, p);
        assert_eq!(
            "fluctuation".parse::<Method>().unwrap(),
            Method::Fluctuation
        );
        assert!("mag".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn keep_counts_match_across_methods(rate in 0.0f64..0.9, seed in any::<u64>()) {
            let c = small();
            let stats = collect_stats(&c, &[vec![1, 4, 2]]).unwrap();
            let scores = vec![(0..10).map(|i| (i * 7 % 10) as f64).collect::<Vec<_>>(); 2];
            let i = PlanInputs { ckpt: &c, fbn_scores: Some(&scores), stats: Some(&stats) };
            let expected = keep_count(10, rate).unwrap();
            for m in Method::ALL {
                let p = build_plan(m, &i, rate, RngSeed(seed)).unwrap();
                for k in &p.per_layer_kept {
                    prop_assert_eq!(k.len(), expected);
                    prop_assert!(k.windows(2).all(|w| w[0] < w[1]));
                }
                prop_assert!(p.validate(&c).is_ok());
            }
        }
    }
}
