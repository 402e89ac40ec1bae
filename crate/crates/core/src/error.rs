//! Error type shared by all library stages.

use thiserror::Error;

/// Errors produced by parsing, evaluation, integration and the
/// certification stages.
#[derive(Debug, Clone, Error)]
pub enum CoreError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },

    #[error("variable index out of range: x{index} with dimension {dim}")]
    VarOutOfRange { index: usize, dim: usize },

    #[error("domain violation in `{subexpr}`: {msg}")]
    Domain { subexpr: String, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid problem data: {0}")]
    Invalid(String),

    #[error("integrator failure: {0}")]
    Integration(String),

    #[error("root solve failed: {0}")]
    RootSolve(String),

    #[error("ordering violation in the maximized flow: {0}")]
    Ordering(String),

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("zero denominator in a switching-time gradient: {0}")]
    ZeroDenominator(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no qualifying probe found: {0}")]
    ProbeExhausted(String),
}
