//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor operations, canonicalization, graph
/// evaluation, gauge handling, and experiment configuration.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input is degenerate for the requested decomposition
    /// (e.g. an all-zero matrix or an all-zero channel slice).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Iterative balancing failed to reach the requested tolerance.
    #[error("balancing did not converge: residual {residual:.3e} after {iterations} sweeps")]
    NoConvergence { residual: f64, iterations: usize },

    /// A non-finite value was encountered where finiteness is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A gauge assignment violates the structural constraints of the graph.
    #[error("gauge constraint violation: {0}")]
    ConstraintViolation(String),

    /// The operation does not support this graph structure.
    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),

    /// A file or text payload could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// An experiment configuration is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
