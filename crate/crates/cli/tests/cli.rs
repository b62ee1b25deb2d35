// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_hidden": 24, "context_len": 16},
  "train": {"steps": 20, "log_every": 10},
  "data": {"synthetic_bytes": 30000, "eval_tokens": 1500},
  "capture": {"calibration_size": 16},
  "fbn": {"group_size": 4, "n_components": 6}
}"#;

fn fbnprune(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.json");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_fbnprune"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = fbnprune(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join("out").join(name)).unwrap()
}

#[test]
fn full_chain_emits_artifacts_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        for stage in ["train", "capture", "decompose"] {
            ok(d, &[stage]);
        }
        ok(d, &["prune", "--method", "canica", "--rate", "0.2"]);
        ok(d, &["eval"]);
    }
    let names = [
        "model.fbnp",
        "calibration.json",
        "masks.json",
        "plan.json",
        "pruned.fbnp",
        "eval.json",
    ];
    for n in names {
        assert_eq!(
            read(a.path(), n),
            read(b.path(), n),
            "{n} differs between runs"
        );
    }
    let dumps = std::fs::read_dir(a.path().join("out/signals"))
        .unwrap()
        .count();
    assert_eq!(dumps, 4 * 2);
    for stage in ["train", "capture", "decompose", "prune", "eval"] {
        assert!(a
            .path()
            .join(format!("out/manifests/{stage}.json"))
            .exists());
    }
    let report: serde_json::Value = serde_json::from_slice(&read(a.path(), "eval.json")).unwrap();
    assert_eq!(report["rate"], 0.2);
    assert_eq!(report["method"], "canica");
    let plan: serde_json::Value = serde_json::from_slice(&read(a.path(), "plan.json")).unwrap();
    for kept in plan["per_layer_kept"].as_array().unwrap() {
        assert_eq!(kept.as_array().unwrap().len(), 19);
    }
}

#[test]
fn eval_of_unpruned_model_reports_rate_zero() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["train"]);
    ok(d.path(), &["eval"]);
    let report: serde_json::Value = serde_json::from_slice(&read(d.path(), "eval.json")).unwrap();
    assert_eq!(report["rate"], 0.0);
    assert!(report["method"].is_null());
    assert!(report["perplexity"].as_f64().unwrap() >= 1.0);
}

#[test]
fn prune_chains_missing_stages() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["train"]);
    ok(d.path(), &["prune", "--method", "canica"]);
    for n in ["calibration.json", "masks.json", "plan.json", "pruned.fbnp"] {
        assert!(d.path().join("out").join(n).exists(), "{n} missing");
    }
}

#[test]
fn error_categories_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = fbnprune(d.path(), &["--set", "prune.bogus=1", "eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prune.bogus"));

    std::fs::write(d.path().join("bad.json"), r#"{"fbn": {"treshold": 2}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fbnprune"))
        .args([
            "--config",
            d.path().join("bad.json").to_str().unwrap(),
            "eval",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("treshold"));

    let out = fbnprune(d.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(3));

    ok(d.path(), &["train"]);
    ok(d.path(), &["capture"]);
    let out = fbnprune(
        d.path(),
        &[
            "--set",
            "fbn.ica_max_iter=1",
            "--set",
            "decompose.min_converged_fraction=1.0",
            "decompose",
        ],
    );
    assert_eq!(out.status.code(), Some(5));
    assert!(!d.path().join("out/masks.json").exists());
}

#[test]
fn sweep_writes_complete_csv() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["train"]);
    ok(
        d.path(),
        &[
            "--set",
            "sweep.seeds=[3,4]",
            "sweep",
            "--axis",
            "n_components",
        ],
    );
    let csv = String::from_utf8(read(d.path(), "sweep_n_components.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,rate,seed,axis,x,perplexity,tokens");
    // baseline plus six grid points for each of two seeds
    assert_eq!(lines.len(), 1 + 1 + 12);
    for x in ["10", "20", "64", "128", "256", "512"] {
        assert_eq!(
            lines
                .iter()
                .filter(|l| l.split(',').nth(4) == Some(x))
                .count(),
            2
        );
    }
}
