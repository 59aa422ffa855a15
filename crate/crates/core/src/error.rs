use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("neuron {neuron} has no active incoming weights")]
    FullyMaskedNeuron { neuron: usize },

    #[error("preconditioner was built for a different mask")]
    StalePreconditioner,

    #[error("k = {k} exceeds the {available} available entries")]
    TooMany { k: usize, available: usize },

    #[error("idx parse error at byte offset {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        LabError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Config problems are user errors (exit code 1); everything else is a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(self, LabError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
