use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point or vector violated a geometric precondition.
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A configuration value is out of range. `field` is the dotted key path.
    #[error("invalid config field `{field}`: {msg}")]
    InvalidConfig { field: String, msg: String },

    /// Batch or matrix shapes do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A paired batch does not satisfy its contract.
    #[error("invalid batch: {0}")]
    Batch(String),

    #[error("dataset cannot serve request: {0}")]
    Sampling(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown feature format `{0}` (expected csv or gmf1)")]
    UnknownFormat(String),

    #[error("snapshot rejected: {0}")]
    Snapshot(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than numerics or IO.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::Shape(_)
                | Error::Batch(_)
                | Error::Sampling(_)
                | Error::Parse { .. }
                | Error::UnknownFormat(_)
                | Error::Snapshot(_)
        )
    }
}
