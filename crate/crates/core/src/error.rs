use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },

    #[error("invalid patch: {0}")]
    Patch(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} (batch {batch}): {detail}")]
    Diverged {
        step: usize,
        batch: usize,
        detail: String,
    },

    #[error("missing reference: {0}")]
    MissingReference(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI for exit reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Asymmetric(_) => "asymmetric",
            Error::NotPsd(_) => "not_psd",
            Error::Degenerate(_) => "degenerate",
            Error::Invalid(_) => "invalid_argument",
            Error::OutOfVocab { .. } => "out_of_vocab",
            Error::TooLong { .. } => "too_long",
            Error::Patch(_) => "invalid_patch",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::MissingReference(_) => "missing_reference",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
