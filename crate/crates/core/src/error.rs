//! Error taxonomy shared by the library and the CLI.
//!
//! The CLI maps these onto process exit codes: usage/config errors exit 2,
//! data errors exit 3, numeric failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StageError {
    /// Operand shapes do not conform for a numeric primitive.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    /// Invalid or inconsistent configuration, caught before any compute.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad command-line arguments or misuse of a command.
    #[error("usage error: {0}")]
    Usage(String),

    /// Missing, corrupt, or inconsistent dataset/checkpoint files.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: non-finite values, singular systems, diverged runs.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl StageError {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Usage(_) | StageError::Config(_) => 2,
            StageError::Data(_) | StageError::Io(_) => 3,
            StageError::Numeric(_) | StageError::ShapeMismatch { .. } => 4,
        }
    }

    /// Short machine-parseable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            StageError::Usage(_) | StageError::Config(_) => "usage",
            StageError::Data(_) | StageError::Io(_) => "data",
            StageError::Numeric(_) | StageError::ShapeMismatch { .. } => "numeric",
        }
    }
}
