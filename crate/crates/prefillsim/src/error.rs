//! Library error type.

use thiserror::Error;

/// Errors surfaced by configuration validation, simulation, and I/O.
#[derive(Debug, Error)]
pub enum SimError {
    /// A configuration field failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An operation was called with arguments that violate its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A batch cannot run on the given cluster (memory or layout).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A trace or config file could not be parsed. Carries the line number
    /// when one is known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
