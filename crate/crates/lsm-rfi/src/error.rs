//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad hyper-parameter values, inconsistent
    /// shapes requested by the caller, unusable CLI arguments.
    #[error("config: {0}")]
    Config(String),

    /// Data that is structurally valid but semantically unusable
    /// (empty dataset, shape mismatch between model and data, ...).
    #[error("data: {0}")]
    Data(String),

    /// A malformed binary file. `offset` is the byte position at which
    /// decoding gave up.
    #[error("format: {msg} at byte {offset}")]
    Format { offset: u64, msg: String },

    /// Numeric divergence: non-finite loss, exploding state, failed
    /// convergence of an iterative routine.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A metric that has no value on this input (e.g. AUROC with
    /// single-class truth). Callers usually report it as absent.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// data/format/io problems, 4 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::UndefinedMetric(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
