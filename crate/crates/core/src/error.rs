// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors raised anywhere in the pruning pipeline.
///
/// The variants are grouped by how an operator should react to them; the
/// command-line driver maps each category onto a distinct exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("convergence error: {0}")]
    Convergence(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
