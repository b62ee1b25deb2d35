// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: defaults, JSON config files and `key=value` overrides.

use crate::CliError;
use fbnprune::evalkit::Axis;
use fbnprune::fbn::FbnConfig;
use fbnprune::model::{ModelConfig, TrainConfig};
use fbnprune::pruning::Method;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Text corpus; a seeded synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    /// Trailing share of the corpus held out for evaluation.
    pub heldout_fraction: f64,
    /// Cap on evaluation tokens; all held-out tokens when absent.
    pub eval_tokens: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic_bytes: 1_000_000,
            synthetic_seed: 1,
            heldout_fraction: 0.1,
            eval_tokens: Some(16_384),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureConfig {
    /// Calibration samples drawn from the training split.
    pub calibration_size: usize,
    /// Groups whose signal matrices are written as dump files.
    pub dump_groups: usize,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            calibration_size: 3200,
            dump_groups: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeConfig {
    /// Fail with a convergence error below this share of converged ICA runs.
    pub min_converged_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub method: Method,
    pub rate: f64,
    pub compensation: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            method: Method::Canica,
            rate: 0.2,
            compensation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: Axis,
    /// Axis values; the axis' standard grid when absent.
    pub values: Option<Vec<f64>>,
    /// Methods compared on the `pruning_rate` axis; other axes use the
    /// first entry.
    pub methods: Vec<Method>,
    /// Pruning rate held fixed on the other axes.
    pub rate: f64,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: Axis::NComponents,
            values: None,
            methods: vec![Method::Canica],
            rate: 0.2,
            seeds: vec![0],
        }
    }
}

impl SweepConfig {
    pub fn grid(&self) -> Vec<f64> {
        self.values.clone().unwrap_or_else(|| match self.axis {
            Axis::NComponents => vec![10.0, 20.0, 64.0, 128.0, 256.0, 512.0],
            Axis::CalibrationSize => vec![40.0, 480.0, 1600.0, 3200.0],
            Axis::PruningRate => vec![0.1, 0.2, 0.3],
        })
    }
}

/// Explicit artifact paths; each defaults to a file under `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub checkpoint: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub pruned: Option<PathBuf>,
    /// Checkpoint scored by `eval`; the pruned model when it exists.
    pub eval_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub capture: CaptureConfig,
    pub fbn: FbnConfig,
    pub decompose: DecomposeConfig,
    pub prune: PruneConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            capture: CaptureConfig::default(),
            fbn: FbnConfig::default(),
            decompose: DecomposeConfig::default(),
            prune: PruneConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies one `dotted.key=value` override. The key must already exist in
/// the configuration tree; the value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let mut node = &mut *tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Defaults, then the config file, then overrides, then validation.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Some(path) = file {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_slice(&bytes).map_err(|e| {
            CliError::Config(format!("config {} is not valid JSON: {e}", path.display()))
        })?;
        if !patch.is_object() {
            return Err(CliError::Config(
                "config file must hold a JSON object".into(),
            ));
        }
        merge(&mut tree, patch);
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: fbnprune::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.fbn.validate().map_err(cfg)?;
        if !(0.0..1.0).contains(&self.prune.rate) {
            return Err(CliError::Config(format!(
                "prune.rate {} outside [0, 1)",
                self.prune.rate
            )));
        }
        if !(0.0..1.0).contains(&self.data.heldout_fraction) {
            return Err(CliError::Config(
                "data.heldout_fraction outside [0, 1)".into(),
            ));
        }
        if self.capture.calibration_size == 0 {
            return Err(CliError::Config(
                "capture.calibration_size must be positive".into(),
            ));
        }
        if self.sweep.methods.is_empty() || self.sweep.seeds.is_empty() {
            return Err(CliError::Config(
                "sweep.methods and sweep.seeds must be non-empty".into(),
            ));
        }
        Ok(())
    }

    pub fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit
            .clone()
            .unwrap_or_else(|| self.out_dir.join(default))
    }

    /// The configuration sections a stage depends on, echoed into its
    /// artifacts. Unrelated settings stay out so that, say, a new pruning
    /// rate does not change the training checkpoint.
    pub fn stage_view(&self, stage: &str) -> Value {
        let mut v = serde_json::Map::new();
        let mut put = |k: &str, x: Value| {
            v.insert(k.to_string(), x);
        };
        put("seed", Value::from(self.seed));
        put("data", j(&self.data));
        put("model", j(&self.model));
        put("train", j(&self.train));
        if stage != "train" {
            put("capture", j(&self.capture));
        }
        if matches!(stage, "decompose" | "prune" | "eval" | "sweep") {
            put("fbn", j(&self.fbn));
        }
        if matches!(stage, "prune" | "eval") {
            put("prune", j(&self.prune));
        }
        if stage == "sweep" {
            put("prune", j(&self.prune));
            put("sweep", j(&self.sweep));
        }
        Value::Object(v)
    }
}

fn j<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = resolve(
            None,
            &["prune.rate=0.3".into(), "prune.method=random".into()],
        )
        .unwrap();
        assert_eq!(cfg.prune.rate, 0.3);
        assert_eq!(cfg.prune.method, Method::Random);
        let err = resolve(None, &["prune.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("prune.bogus"));
        assert!(resolve(None, &["prune.rate=1.5".into()]).is_err());
    }

    #[test]
    fn file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"d_hidden": 64}, "seed": 7}"#).unwrap();
        let cfg = resolve(Some(&p), &[]).unwrap();
        assert_eq!(
            (cfg.model.d_hidden, cfg.model.d_model, cfg.seed),
            (64, 128, 7)
        );
        std::fs::write(&p, r#"{"modle": {}}"#).unwrap();
        let err = resolve(Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("modle"));
    }

    #[test]
    fn stock_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.fbn.group_size, 40);
        assert_eq!(c.fbn.n_components, 128);
        assert_eq!(c.capture.calibration_size, 3200);
        assert_eq!(c.sweep.grid(), vec![10.0, 20.0, 64.0, 128.0, 256.0, 512.0]);
    }
}
