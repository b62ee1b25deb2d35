// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline stages behind each subcommand.

use crate::config::RunConfig;
use crate::CliError;
use fbnprune::artifact::{canonical_json, file_digest, sha256_hex, write_atomic};
use fbnprune::calibration::{
    split_heldout, tokenize, CalibrationManifest, CalibrationSet, GroupPlan,
};
use fbnprune::corpus::synthetic_corpus;
use fbnprune::evalkit::{
    calibration_for_seed, compare_methods, perplexity, sweep, Axis, EvalReport, ExperimentConfig,
    ExperimentData, SweepSpec,
};
use fbnprune::fbn::{assemble_signals, decompose_model, group_plan, write_signal_dump, MaskFile};
use fbnprune::model::{forward, load_checkpoint, save_checkpoint, train, ModelCheckpoint};
use fbnprune::numerics::RngSeed;
use fbnprune::pruning::{
    apply_plan, build_plan, collect_stats, with_compensation, Method, PlanInputs,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

type Result<T> = std::result::Result<T, CliError>;

/// Output of `capture`: the calibration manifest plus what was dumped.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureFile {
    pub calibration: CalibrationManifest,
    pub groups: GroupPlan,
    pub signal_dumps: Vec<String>,
    pub provenance: BTreeMap<String, Value>,
}

/// Records what a stage read and wrote.
struct Manifest {
    stage: &'static str,
    inputs: BTreeMap<String, Value>,
    outputs: BTreeMap<String, Value>,
}

impl Manifest {
    fn new(stage: &'static str) -> Self {
        Manifest {
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn entry(path: &Path) -> Result<Value> {
        Ok(json!({ "path": path.display().to_string(), "digest": file_digest(path)? }))
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.into(), Self::entry(path)?);
        Ok(())
    }

    fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.outputs.insert(name.into(), Self::entry(path)?);
        Ok(())
    }

    fn write(self, cfg: &RunConfig) -> Result<PathBuf> {
        let view = cfg.stage_view(self.stage);
        let body = json!({
            "stage": self.stage,
            "version": env!("CARGO_PKG_VERSION"),
            "config": view,
            "config_digest": digest_of(&view)?,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let path = cfg
            .out_dir
            .join("manifests")
            .join(format!("{}.json", self.stage));
        write_atomic(&path, &canonical_json(&body)?)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(fbnprune::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn digest_of(v: &Value) -> Result<String> {
    Ok(sha256_hex(&canonical_json(v)?))
}

fn provenance(
    cfg: &RunConfig,
    stage: &str,
    inputs: &[(&str, String)],
) -> Result<BTreeMap<String, Value>> {
    let view = cfg.stage_view(stage);
    let mut p = BTreeMap::new();
    p.insert("config_digest".into(), Value::from(digest_of(&view)?));
    p.insert("config".into(), view);
    for (k, d) in inputs {
        p.insert(format!("{k}_digest"), Value::from(d.clone()));
    }
    Ok(p)
}

/// The training and held-out parts of the configured corpus.
struct Corpus {
    bytes: Vec<u8>,
    cut: usize,
}

impl Corpus {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let bytes = match &cfg.data.corpus {
            Some(p) => std::fs::read(p).map_err(|e| io_err(p, e))?,
            None => synthetic_corpus(RngSeed(cfg.data.synthetic_seed), cfg.data.synthetic_bytes)
                .into_bytes(),
        };
        let (train, _) = split_heldout(&bytes, cfg.data.heldout_fraction)?;
        let cut = train.len();
        Ok(Corpus { bytes, cut })
    }

    fn train(&self) -> &[u8] {
        &self.bytes[..self.cut]
    }

    fn heldout(&self, cfg: &RunConfig) -> Vec<u32> {
        let mut t = tokenize(&self.bytes[self.cut..]);
        if let Some(n) = cfg.data.eval_tokens {
            t.truncate(n);
        }
        t
    }
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.path(&cfg.paths.checkpoint, "model.fbnp")
}

fn calibration_path(cfg: &RunConfig) -> PathBuf {
    cfg.path(&cfg.paths.calibration, "calibration.json")
}

fn masks_path(cfg: &RunConfig) -> PathBuf {
    cfg.path(&cfg.paths.masks, "masks.json")
}

fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    let c = load_checkpoint(path)?;
    log::info!(
        "loaded {} ({} parameters)",
        path.display(),
        c.parameter_count()
    );
    Ok(c)
}

pub fn run_train(cfg: &RunConfig) -> Result<()> {
    let corpus = Corpus::load(cfg)?;
    let tokens = tokenize(corpus.train());
    let mut ckpt = train(&cfg.model, &tokens, RngSeed(cfg.seed), &cfg.train)?;
    let view = cfg.stage_view("train");
    ckpt.meta.insert("stage".into(), "train".into());
    ckpt.meta.insert(
        "config".into(),
        String::from_utf8(canonical_json(&view)?).expect("utf-8 json"),
    );
    ckpt.meta.insert("config_digest".into(), digest_of(&view)?);
    ckpt.meta
        .insert("corpus_digest".into(), sha256_hex(&corpus.bytes));
    let out = checkpoint_path(cfg);
    save_checkpoint(&ckpt, &out)?;
    let mut m = Manifest::new("train");
    if let Some(p) = &cfg.data.corpus {
        m.input("corpus", p)?;
    }
    m.output("checkpoint", &out)?;
    m.write(cfg)?;
    Ok(())
}

fn capture_file(path: &Path) -> Result<CaptureFile> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Core(fbnprune::Error::Format(format!("bad capture file: {e}"))))
}

pub fn run_capture(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = checkpoint_path(cfg);
    let ckpt = load_model(&ckpt_path)?;
    let corpus = Corpus::load(cfg)?;
    let calib = calibration_for_seed(
        corpus.train(),
        ckpt.config.context_len,
        cfg.capture.calibration_size,
        cfg.seed,
    )?;
    let groups = group_plan(calib.len(), &cfg.fbn)?;
    let dir = cfg.out_dir.join("signals");
    let mut dumps = Vec::new();
    for (g, members) in groups
        .assignment
        .iter()
        .take(cfg.capture.dump_groups)
        .enumerate()
    {
        for &sid in members {
            let out = forward(&ckpt, &calib.samples[sid], true)?;
            for rec in out.captures.expect("capture requested") {
                let s = assemble_signals(&rec, sid, cfg.fbn.signal_mode)?;
                let name = format!("g{g:03}_s{sid:05}_l{:02}.fbns", rec.layer);
                write_signal_dump(dir.join(&name), &s)?;
                dumps.push(name);
            }
        }
    }
    let file = CaptureFile {
        calibration: calib.manifest(),
        groups,
        signal_dumps: dumps,
        provenance: provenance(cfg, "capture", &[("checkpoint", ckpt.digest())])?,
    };
    let out = calibration_path(cfg);
    write_atomic(&out, &canonical_json(&file)?)?;
    let mut m = Manifest::new("capture");
    m.input("checkpoint", &ckpt_path)?;
    m.output("calibration", &out)?;
    m.write(cfg)?;
    Ok(())
}

/// Rebuilds the calibration set named by the capture file.
fn load_calibration(cfg: &RunConfig, corpus: &Corpus) -> Result<(CalibrationSet, PathBuf)> {
    let path = calibration_path(cfg);
    let file = capture_file(&path)?;
    Ok((
        CalibrationSet::from_manifest(&file.calibration, corpus.train())?,
        path,
    ))
}

pub fn run_decompose(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = checkpoint_path(cfg);
    let ckpt = load_model(&ckpt_path)?;
    let corpus = Corpus::load(cfg)?;
    let (calib, calib_path) = load_calibration(cfg, &corpus)?;
    let analysis = decompose_model(&ckpt, &calib, &cfg.fbn, cfg.workers)?;
    let frac = analysis.converged_fraction();
    if frac < cfg.decompose.min_converged_fraction {
        return Err(CliError::Convergence(format!(
            "{:.1}% of ICA runs converged, below the required {:.1}%",
            100.0 * frac,
            100.0 * cfg.decompose.min_converged_fraction
        )));
    }
    let mut masks = MaskFile::from_analysis(&analysis);
    masks.provenance = provenance(
        cfg,
        "decompose",
        &[
            ("checkpoint", ckpt.digest()),
            ("calibration", file_digest(&calib_path)?),
        ],
    )?;
    let out = masks_path(cfg);
    masks.save(&out)?;
    let mut m = Manifest::new("decompose");
    m.input("checkpoint", &ckpt_path)?;
    m.input("calibration", &calib_path)?;
    m.output("masks", &out)?;
    m.write(cfg)?;
    Ok(())
}

pub fn run_prune(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = checkpoint_path(cfg);
    let ckpt = load_model(&ckpt_path)?;
    let method = cfg.prune.method;
    let needs_stats = cfg.prune.compensation || method == Method::Fluctuation;

    if !calibration_path(cfg).exists() && (needs_stats || method == Method::Canica) {
        log::info!("no calibration set yet; running capture");
        run_capture(cfg)?;
    }
    let masks = if method == Method::Canica {
        let p = masks_path(cfg);
        if !p.exists() {
            log::info!("no masks yet; running decompose");
            run_decompose(cfg)?;
        }
        let masks = MaskFile::load(&p)?;
        let recorded = masks
            .provenance
            .get("checkpoint_digest")
            .and_then(Value::as_str);
        if recorded.is_some_and(|d| d != ckpt.digest()) {
            return Err(CliError::Core(fbnprune::Error::Format(format!(
                "{} was computed for a different checkpoint",
                p.display()
            ))));
        }
        Some(masks)
    } else {
        None
    };
    let corpus = Corpus::load(cfg)?;
    let stats = if needs_stats {
        let (calib, _) = load_calibration(cfg, &corpus)?;
        Some(collect_stats(&ckpt, &calib.samples)?)
    } else {
        None
    };
    let scores = masks.as_ref().map(MaskFile::scores);
    let inputs = PlanInputs {
        ckpt: &ckpt,
        fbn_scores: scores.as_deref(),
        stats: stats.as_ref(),
    };
    let mut plan = build_plan(method, &inputs, cfg.prune.rate, RngSeed(cfg.seed))?;
    if cfg.prune.compensation {
        plan = with_compensation(&ckpt, plan, stats.as_ref().expect("stats collected"))?;
    }
    let mut pruned = apply_plan(&ckpt, &plan)?;

    let mut inputs = vec![("checkpoint", ckpt.digest())];
    let mut m = Manifest::new("prune");
    m.input("checkpoint", &ckpt_path)?;
    if masks.is_some() {
        inputs.push(("masks", file_digest(masks_path(cfg))?));
        m.input("masks", &masks_path(cfg))?;
    }
    if needs_stats {
        inputs.push(("calibration", file_digest(calibration_path(cfg))?));
        m.input("calibration", &calibration_path(cfg))?;
    }
    let prov = provenance(cfg, "prune", &inputs)?;
    let plan_path = cfg.path(&cfg.paths.plan, "plan.json");
    plan.save(&plan_path, prov)?;

    pruned.meta.insert("stage".into(), "prune".into());
    pruned
        .meta
        .insert("pruning.method".into(), method.name().into());
    pruned
        .meta
        .insert("pruning.rate".into(), cfg.prune.rate.to_string());
    pruned.meta.insert(
        "pruning.compensation".into(),
        cfg.prune.compensation.to_string(),
    );
    pruned
        .meta
        .insert("source_checkpoint_digest".into(), ckpt.digest());
    pruned
        .meta
        .insert("plan_digest".into(), file_digest(&plan_path)?);
    let out = cfg.path(&cfg.paths.pruned, "pruned.fbnp");
    save_checkpoint(&pruned, &out)?;
    log::info!(
        "pruned {} -> {} parameters",
        ckpt.parameter_count(),
        pruned.parameter_count()
    );
    m.output("plan", &plan_path)?;
    m.output("pruned", &out)?;
    m.write(cfg)?;
    Ok(())
}

pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let path = cfg.paths.eval_checkpoint.clone().unwrap_or_else(|| {
        let pruned = cfg.path(&cfg.paths.pruned, "pruned.fbnp");
        if pruned.exists() {
            pruned
        } else {
            checkpoint_path(cfg)
        }
    });
    let ckpt = load_model(&path)?;
    let corpus = Corpus::load(cfg)?;
    let mut report = perplexity(&ckpt, &corpus.heldout(cfg))?;
    report.method = ckpt
        .meta
        .get("pruning.method")
        .map(|m| m.parse())
        .transpose()?;
    report.rate = ckpt
        .meta
        .get("pruning.rate")
        .map(|r| r.parse::<f64>())
        .transpose()
        .map_err(|e| {
            CliError::Core(fbnprune::Error::Format(format!(
                "bad pruning.rate in checkpoint: {e}"
            )))
        })?
        .unwrap_or(0.0);
    report.config = cfg.stage_view("eval");
    let out = cfg.out_dir.join("eval.json");
    write_atomic(&out, &canonical_json(&report)?)?;
    println!(
        "perplexity {:.6} over {} tokens",
        report.perplexity, report.token_count
    );
    let mut m = Manifest::new("eval");
    m.input("checkpoint", &path)?;
    m.output("report", &out)?;
    m.write(cfg)?;
    Ok(report)
}

pub fn run_sweep(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = checkpoint_path(cfg);
    let ckpt = load_model(&ckpt_path)?;
    let corpus = Corpus::load(cfg)?;
    let heldout = corpus.heldout(cfg);
    let data = ExperimentData {
        calibration_source: corpus.train(),
        heldout: &heldout,
    };
    let exp = ExperimentConfig {
        calibration_size: cfg.capture.calibration_size,
        fbn: cfg.fbn.clone(),
        compensation: cfg.prune.compensation,
    };
    let s = &cfg.sweep;
    let result = if s.axis == Axis::PruningRate {
        compare_methods(
            &ckpt,
            &s.methods,
            &s.grid(),
            &s.seeds,
            &exp,
            &data,
            cfg.workers,
        )?
    } else {
        let spec = SweepSpec {
            axis: s.axis,
            values: s.grid(),
            method: s.methods[0],
            rate: s.rate,
            seeds: s.seeds.clone(),
        };
        sweep(&ckpt, &spec, &exp, &data, cfg.workers)?
    };
    let stem = format!("sweep_{}", s.axis.name());
    let csv = cfg.out_dir.join(format!("{stem}.csv"));
    let js = cfg.out_dir.join(format!("{stem}.json"));
    write_atomic(&csv, result.to_csv().as_bytes())?;
    let body = json!({
        "result": result,
        "provenance": provenance(cfg, "sweep", &[("checkpoint", ckpt.digest())])?,
    });
    write_atomic(&js, &canonical_json(&body)?)?;
    print!("{}", result.to_csv());
    let mut m = Manifest::new("sweep");
    m.input("checkpoint", &ckpt_path)?;
    m.output("csv", &csv)?;
    m.output("json", &js)?;
    m.write(cfg)?;
    Ok(())
}
