//! Error type shared across the workbench.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched or empty dimensions.
    #[error("size error: {0}")]
    Size(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An index past the end of a vector or class range.
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    /// A numeric procedure failed (divergence, singular system, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The least-squares solver hit its iteration cap; `best` is the last iterate.
    #[error("nnls did not converge after {iterations} iterations (residual {residual:.3e})")]
    NnlsNoConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    /// An attack cannot run against this update (e.g. bias attack on a no-bias model).
    #[error("attack {attack} cannot run: {reason}")]
    Capability { attack: String, reason: String },

    /// A cell could not be parsed; `row` is 1-based and counts the header.
    #[error("{}:{row}: {message}", path.display())]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    /// A column mapping or label dictionary is inconsistent.
    #[error("schema error: {0}")]
    Schema(String),

    /// An experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// A referenced client or resource does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("{}: {source}", path.display())]
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
