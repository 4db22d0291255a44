//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by dataset handling, model construction, training and evaluation.
#[derive(Debug, Error)]
pub enum DcnError {
    /// A caller-supplied value violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration failed validation; one message per offending field.
    #[error("invalid config:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged in {phase} at step {step}: loss = {loss}")]
    Divergence { phase: String, step: u64, loss: f64 },
}

impl DcnError {
    /// Shorthand for building an `InvalidInput` error.
    pub fn invalid(msg: impl Into<String>) -> Self {
        DcnError::InvalidInput(msg.into())
    }

    /// Exit code contract: 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DcnError::InvalidInput(_) | DcnError::InvalidConfig(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DcnError>;
