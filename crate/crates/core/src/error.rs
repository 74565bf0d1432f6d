use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("probability vector sums to {sum}, expected 1")]
    NotNormalized { sum: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("input mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("training diverged at mini-batch {batch}: {what}")]
    Diverged { batch: usize, what: String },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("search budget exceeded: {0} sequences")]
    BudgetExceeded(u128),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotNormalized { .. } => "not_normalized",
            Error::InvalidConfig(_) => "invalid_config",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::ModeMismatch(_) => "mode_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::NonFiniteGradient => "non_finite_gradient",
            Error::BudgetExceeded(_) => "budget_exceeded",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
