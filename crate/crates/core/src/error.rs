use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invariant violated at line {line}: field `{field}`: {message}")]
    Invariant {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("enumeration budget exceeded: vocab_size={vocab_size}, max_len={max_len} gives {sequences} sequences (budget {budget})")]
    Budget {
        vocab_size: usize,
        max_len: usize,
        sequences: u128,
        budget: u64,
    },

    #[error("infeasible prefix: {0}")]
    Infeasible(String),

    #[error("context unreachable under the current policy: {0}")]
    Unreachable(String),

    #[error("group size mismatch: expected {expected}, got {got}")]
    GroupSize { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("total value over the evaluation set is zero")]
    ZeroTotalValue,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
