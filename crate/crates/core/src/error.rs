use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    /// A query row had no admissible key left after masking.
    #[error("attention row {row} has every key masked")]
    MaskedRow { row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error in record `{record}`: {reason}")]
    Data { record: String, reason: String },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("numerical abort at epoch {epoch}, batch {batch}: loss={loss}, grad_norm={grad_norm}")]
    Numerical {
        epoch: usize,
        batch: usize,
        loss: f64,
        grad_norm: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn data(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            record: record.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Numerical { .. } => 4,
            Error::Data { .. }
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::CorruptHeader(_)
            | Error::TensorMismatch { .. }
            | Error::Io(_) => 3,
            _ => 1,
        }
    }
}
