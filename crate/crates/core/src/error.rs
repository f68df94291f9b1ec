//! Crate-wide error type. Numeric-kernel errors stay in
//! [`crate::tensor::TensorError`]; this wraps them together with data,
//! format, and orchestration failures.

use crate::format::FormatError;
use crate::tensor::TensorError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("insufficient trial pairs: need {need_target} target (have {have_target}), need {need_nontarget} nontarget (have {have_nontarget})")]
    InsufficientPairs {
        need_target: usize,
        have_target: usize,
        need_nontarget: usize,
        have_nontarget: usize,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing artifact {path}; run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("config hash mismatch: {0}")]
    HashMismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to: 1 for validation problems the
    /// user can fix, 2 for internal failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Tensor(_) | Error::Diverged(_) => 2,
            Error::Format(_)
            | Error::Io { .. }
            | Error::Invalid(_)
            | Error::InsufficientPairs { .. }
            | Error::MissingArtifact { .. }
            | Error::HashMismatch(_) => 1,
        }
    }
}
