//! Crate-wide error type and the exit-code policy used by the CLI.

use thiserror::Error;

/// Everything that can go wrong across the engine, from shape mismatches in
/// the tape to unreadable checkpoint files.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands cannot be combined under the declared broadcast policy.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operand violates an op's domain (log of a non-positive value,
    /// label out of range, non-square eigen input, ...).
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// An op produced NaN or an infinity. Surfaced by the op that created the
    /// value, not by a later consumer.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// An iteration failed to reach its stopping criterion.
    #[error("{what}: failed to converge ({detail})")]
    Convergence { what: &'static str, detail: String },

    /// A caller-supplied argument is structurally invalid.
    #[error("{0}")]
    InvalidArgument(String),

    /// A run configuration file could not be parsed or failed validation.
    #[error("config: {0}")]
    Config(String),

    /// A checkpoint file is missing fields, has the wrong version, or does not
    /// match the model it is being loaded into.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 0 success, 1 usage, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Checkpoint(_) => 1,
            Error::ShapeMismatch { .. }
            | Error::Domain { .. }
            | Error::NonFinite { .. }
            | Error::Convergence { .. } => 2,
            Error::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
