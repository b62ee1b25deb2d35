// SPDX-License-Identifier: MIT OR Apache-2.0

//! `fbnprune`: train a small gated-MLP language model, find functional
//! networks among its MLP neurons and prune the rest.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Convergence(String),
    #[error(transparent)]
    Core(#[from] fbnprune::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use fbnprune::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Convergence(_) => 5,
            CliError::Core(e) => match e {
                E::Argument(_) | E::Dimension(_) => 2,
                E::Io { .. } | E::Format(_) => 3,
                E::Numeric(_) | E::Divergence { .. } => 4,
                E::Convergence(_) => 5,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fbnprune",
    version,
    about = "Functional-network pruning of transformer MLPs"
)]
struct Cli {
    /// JSON config file; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set fbn.n_components=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for decomposition cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for all artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on the corpus.
    Train,
    /// Draw the calibration set and dump signal matrices.
    Capture,
    /// Run the group ICA decomposition and write masks.
    Decompose,
    /// Build a pruning plan and write the pruned checkpoint.
    Prune {
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Held-out perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep one axis and write CSV and JSON tables.
    Sweep {
        /// n_components, calibration_size or pruning_rate
        #[arg(long)]
        axis: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut sets = cli.set.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
        sets.push(format!("fbn.seed={s}"));
    }
    if let Some(w) = cli.workers {
        sets.push(format!("workers={w}"));
    }
    if let Some(d) = &cli.out_dir {
        sets.push(format!(
            "out_dir={}",
            serde_json::Value::from(d.display().to_string())
        ));
    }
    match &cli.command {
        Command::Prune { method, rate } => {
            if let Some(m) = method {
                sets.push(format!(
                    "prune.method={}",
                    serde_json::Value::from(m.as_str())
                ));
            }
            if let Some(r) = rate {
                sets.push(format!("prune.rate={r}"));
            }
        }
        Command::Eval {
            checkpoint: Some(c),
        } => {
            sets.push(format!(
                "paths.eval_checkpoint={}",
                serde_json::Value::from(c.display().to_string())
            ));
        }
        Command::Sweep { axis: Some(a) } => {
            sets.push(format!(
                "sweep.axis={}",
                serde_json::Value::from(a.as_str())
            ));
        }
        _ => {}
    }
    let cfg = config::resolve(cli.config.as_deref(), &sets)?;
    match cli.command {
        Command::Train => commands::run_train(&cfg),
        Command::Capture => commands::run_capture(&cfg),
        Command::Decompose => commands::run_decompose(&cfg),
        Command::Prune { .. } => commands::run_prune(&cfg),
        Command::Eval { .. } => commands::run_eval(&cfg).map(|_| ()),
        Command::Sweep { .. } => commands::run_sweep(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
