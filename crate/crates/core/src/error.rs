use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MixdlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MixdlError {
    /// An argument violated an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A value fell outside a function's numerical domain (zero-norm vectors for cosine similarity).
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    /// A loss term became NaN or infinite; training aborts immediately.
    #[error("non-finite {term} at step {step}: {value}")]
    NonFinite { step: u64, term: &'static str, value: f64 },
}

impl MixdlError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        MixdlError::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MixdlError::Io {
            path: path.into(),
            source,
        }
    }
}
