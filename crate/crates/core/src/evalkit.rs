// SPDX-License-Identifier: MIT OR Apache-2.0

//! Perplexity evaluation, method comparisons and parameter sweeps.

use crate::artifact::{canonical_json, sha256_hex};
use crate::calibration::{ingest_bytes, CalibrationSet};
use crate::error::{Error, Result};
use crate::fbn::{decompose_model, FbnConfig};
use crate::model::{forward, ModelCheckpoint};
use crate::numerics::RngSeed;
use crate::pruning::{
    apply_plan, build_plan, collect_stats, with_compensation, ActivationStats, Method, PlanInputs,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Anything that maps a token prefix to next-token logits.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;
    /// Row-major `tokens.len() × vocab_size` logits.
    fn logits(&self, tokens: &[u32]) -> Result<Vec<f32>>;
}

impl NextTokenModel for ModelCheckpoint {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        Ok(forward(self, tokens, false)?.logits)
    }
}

/// Summed natural-log NLL and the number of predicted tokens.
///
/// Every token after the first is predicted exactly once, from windows of
/// `context_len` inputs placed end to end.
pub fn nll(model: &impl NextTokenModel, tokens: &[u32]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::Argument(format!(
            "perplexity needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let v = model.vocab_size();
    let window = model.context_len();
    let mut sum = 0.0f64;
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + window).min(tokens.len() - 1);
        let logits = model.logits(&tokens[start..end])?;
        for (p, target) in tokens[start + 1..=end].iter().enumerate() {
            let row = &logits[p * v..(p + 1) * v];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&z| (z as f64 - m).exp()).sum::<f64>().ln();
            sum += lse - row[*target as usize] as f64;
        }
        start = end;
    }
    if !sum.is_finite() {
        return Err(Error::Numeric("non-finite negative log-likelihood".into()));
    }
    Ok((sum, tokens.len() - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_digest: String,
    pub dataset_digest: String,
    pub token_count: usize,
    pub nll_sum: f64,
    pub perplexity: f64,
    pub method: Option<Method>,
    pub rate: f64,
    pub config: serde_json::Value,
}

fn token_digest(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

pub fn perplexity(ckpt: &ModelCheckpoint, heldout: &[u32]) -> Result<EvalReport> {
    let (nll_sum, token_count) = nll(ckpt, heldout)?;
    Ok(EvalReport {
        model_digest: ckpt.digest(),
        dataset_digest: token_digest(heldout),
        token_count,
        nll_sum,
        perplexity: (nll_sum / token_count as f64).exp(),
        method: None,
        rate: 0.0,
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    NComponents,
    CalibrationSize,
    PruningRate,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::NComponents => "n_components",
            Axis::CalibrationSize => "calibration_size",
            Axis::PruningRate => "pruning_rate",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Axis::NComponents, Axis::CalibrationSize, Axis::PruningRate]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown sweep axis {s:?}")))
    }
}

/// Settings shared by every cell of a comparison or sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub calibration_size: usize,
    pub fbn: FbnConfig,
    /// Attach the mean-restoring bias to every pruned model.
    pub compensation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            calibration_size: 3200,
            fbn: FbnConfig::default(),
            compensation: true,
        }
    }
}

/// Text to sample calibration windows from, and held-out evaluation tokens.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub calibration_source: &'a [u8],
    pub heldout: &'a [u32],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub rate: f64,
    pub seed: u64,
    pub axis: Axis,
    /// Axis value; `None` on the unpruned baseline row.
    pub x: Option<f64>,
    pub perplexity: f64,
    pub tokens: usize,
    pub nll_sum: f64,
    /// Share of converged ICA runs behind a canica row.
    pub converged_fraction: Option<f64>,
    pub model_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub baseline: Vec<SweepRow>,
    pub rows: Vec<SweepRow>,
    pub config: ExperimentConfig,
    pub dataset_digest: String,
}

pub const CSV_HEADER: &str = "method,rate,seed,axis,x,perplexity,tokens";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.baseline.iter().chain(&self.rows) {
            let x = r.x.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method,
                r.rate,
                r.seed,
                r.axis.name(),
                x,
                r.perplexity,
                r.tokens
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        canonical_json(self)
    }

    /// Mean perplexity of one method at one rate over all its seeds.
    pub fn mean_perplexity(&self, method: Method, rate: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method.name() && r.rate == rate)
            .map(|r| r.perplexity)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-seed upstream results reused across rates and methods.
struct SeedCache {
    calib: CalibrationSet,
    stats: ActivationStats,
    fbn: Option<(Vec<Vec<f64>>, f64)>,
}

const CALIBRATION_STREAM: u64 = 0x63_61_6c_69_62;

/// The calibration set every stage derives from an experiment seed.
pub fn calibration_for_seed(
    source: &[u8],
    context_len: usize,
    n_samples: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    ingest_bytes(
        source,
        context_len,
        n_samples,
        RngSeed(seed).derive(CALIBRATION_STREAM),
    )
}

fn seed_cache(
    ckpt: &ModelCheckpoint,
    cfg: &ExperimentConfig,
    data: &ExperimentData<'_>,
    seed: u64,
) -> Result<SeedCache> {
    let calib = calibration_for_seed(
        data.calibration_source,
        ckpt.config.context_len,
        cfg.calibration_size,
        seed,
    )?;
    let stats = collect_stats(ckpt, &calib.samples)?;
    Ok(SeedCache {
        calib,
        stats,
        fbn: None,
    })
}

fn fbn_scores<'c>(
    cache: &'c mut SeedCache,
    ckpt: &ModelCheckpoint,
    cfg: &ExperimentConfig,
    seed: u64,
    workers: usize,
) -> Result<&'c (Vec<Vec<f64>>, f64)> {
    if cache.fbn.is_none() {
        let fcfg = FbnConfig {
            seed: RngSeed(seed),
            ..cfg.fbn.clone()
        };
        let a = decompose_model(ckpt, &cache.calib, &fcfg, workers)?;
        cache.fbn = Some((a.unit_scores(), a.converged_fraction()));
    }
    Ok(cache.fbn.as_ref().expect("just filled"))
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    ckpt: &ModelCheckpoint,
    cache: &mut SeedCache,
    method: Method,
    rate: f64,
    seed: u64,
    cfg: &ExperimentConfig,
    data: &ExperimentData<'_>,
    workers: usize,
) -> Result<(EvalReport, Option<f64>)> {
    let mut converged = None;
    let scores = if method == Method::Canica && rate > 0.0 {
        let (s, c) = fbn_scores(cache, ckpt, cfg, seed, workers)?;
        converged = Some(*c);
        Some(s.clone())
    } else if method == Method::Canica {
        Some(
            ckpt.config
                .hidden_sizes()
                .iter()
                .map(|&d| vec![0.0; d])
                .collect(),
        )
    } else {
        None
    };
    let inputs = PlanInputs {
        ckpt,
        fbn_scores: scores.as_deref(),
        stats: Some(&cache.stats),
    };
    let mut plan = build_plan(method, &inputs, rate, RngSeed(seed))?;
    if cfg.compensation {
        plan = with_compensation(ckpt, plan, &cache.stats)?;
    }
    let pruned = apply_plan(ckpt, &plan)?;
    let mut report = perplexity(&pruned, data.heldout)?;
    report.method = Some(method);
    report.rate = rate;
    if converged.is_some_and(|c| c < 1.0) {
        log::warn!(
            "canica seed {seed}: only {:.1}% of ICA runs converged",
            100.0 * converged.unwrap_or(0.0)
        );
    }
    Ok((report, converged))
}

fn check_lists(methods: &[Method], rates: &[f64], seeds: &[u64]) -> Result<()> {
    if methods.is_empty() || rates.is_empty() || seeds.is_empty() {
        return Err(Error::Argument(
            "methods, rates and seeds must be non-empty".into(),
        ));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Argument(format!("pruning rate {r} outside [0, 1)")));
    }
    Ok(())
}

fn baseline_row(
    ckpt: &ModelCheckpoint,
    data: &ExperimentData<'_>,
    axis: Axis,
    seed: u64,
) -> Result<SweepRow> {
    let r = perplexity(ckpt, data.heldout)?;
    Ok(SweepRow {
        method: "unpruned".into(),
        rate: 0.0,
        seed,
        axis,
        x: None,
        perplexity: r.perplexity,
        tokens: r.token_count,
        nll_sum: r.nll_sum,
        converged_fraction: None,
        model_digest: r.model_digest,
    })
}

/// Evaluates every (method, rate, seed) cell. Rows come out seed-major, then
/// rate, then method in the given order. Decompositions and activation
/// statistics are computed once per seed and shared.
pub fn compare_methods(
    ckpt: &ModelCheckpoint,
    methods: &[Method],
    rates: &[f64],
    seeds: &[u64],
    cfg: &ExperimentConfig,
    data: &ExperimentData<'_>,
    workers: usize,
) -> Result<SweepResult> {
    check_lists(methods, rates, seeds)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut cache = seed_cache(ckpt, cfg, data, seed)?;
        for &rate in rates {
            for &method in methods {
                let (rep, converged) =
                    run_cell(ckpt, &mut cache, method, rate, seed, cfg, data, workers)?;
                log::info!(
                    "{method} rate {rate} seed {seed}: perplexity {:.4}",
                    rep.perplexity
                );
                rows.push(SweepRow {
                    method: method.name().into(),
                    rate,
                    seed,
                    axis: Axis::PruningRate,
                    x: Some(rate),
                    perplexity: rep.perplexity,
                    tokens: rep.token_count,
                    nll_sum: rep.nll_sum,
                    converged_fraction: converged,
                    model_digest: rep.model_digest,
                });
            }
        }
    }
    Ok(SweepResult {
        axis: Axis::PruningRate,
        baseline: vec![baseline_row(ckpt, data, Axis::PruningRate, seeds[0])?],
        rows,
        config: cfg.clone(),
        dataset_digest: token_digest(data.heldout),
    })
}

/// Fixed part of a sweep: the method, rate and seeds applied at every point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub method: Method,
    pub rate: f64,
    pub seeds: Vec<u64>,
}

/// One pipeline run per axis value with everything else held fixed.
pub fn sweep(
    ckpt: &ModelCheckpoint,
    spec: &SweepSpec,
    cfg: &ExperimentConfig,
    data: &ExperimentData<'_>,
    workers: usize,
) -> Result<SweepResult> {
    if spec.values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    if let Some(w) = spec.values.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!(
            "sweep values must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Argument(format!(
                "{} must be a positive integer, got {v}",
                spec.axis.name()
            )))
        }
    };
    let mut rows = Vec::new();
    let mut shared: HashMap<u64, SeedCache> = HashMap::new();
    for &x in &spec.values {
        let mut cell_cfg = cfg.clone();
        let mut rate = spec.rate;
        match spec.axis {
            Axis::NComponents => cell_cfg.fbn.n_components = as_count(x)?,
            Axis::CalibrationSize => cell_cfg.calibration_size = as_count(x)?,
            Axis::PruningRate => rate = x,
        }
        check_lists(&[spec.method], &[rate], &spec.seeds)?;
        for &seed in &spec.seeds {
            // calibration data and statistics depend only on the seed unless
            // the sweep varies the calibration size
            let mut fresh;
            let cache = if spec.axis == Axis::CalibrationSize {
                fresh = seed_cache(ckpt, &cell_cfg, data, seed)?;
                &mut fresh
            } else {
                if let std::collections::hash_map::Entry::Vacant(e) = shared.entry(seed) {
                    e.insert(seed_cache(ckpt, &cell_cfg, data, seed)?);
                }
                let c = shared.get_mut(&seed).expect("inserted");
                if spec.axis == Axis::NComponents {
                    c.fbn = None;
                }
                c
            };
            let (rep, converged) = run_cell(
                ckpt,
                cache,
                spec.method,
                rate,
                seed,
                &cell_cfg,
                data,
                workers,
            )?;
            log::info!(
                "{} = {x}, seed {seed}: perplexity {:.4}",
                spec.axis.name(),
                rep.perplexity
            );
            rows.push(SweepRow {
                method: spec.method.name().into(),
                rate,
                seed,
                axis: spec.axis,
                x: Some(x),
                perplexity: rep.perplexity,
                tokens: rep.token_count,
                nll_sum: rep.nll_sum,
                converged_fraction: converged,
                model_digest: rep.model_digest,
            });
        }
    }
    Ok(SweepResult {
        axis: spec.axis,
        baseline: vec![baseline_row(ckpt, data, spec.axis, spec.seeds[0])?],
        rows,
        config: cfg.clone(),
        dataset_digest: token_digest(data.heldout),
    })
}
