//! Error type shared by every module.

use thiserror::Error;

/// Failures raised by validation, numerics and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("negative kernel entry K({row},{col}) = {value}")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("row {row} of the kernel sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },

    #[error("detailed balance fails at ({x},{y}): mu(x)K(x,y) - mu(y)K(y,x) = {residual:e}")]
    NotReversible { x: usize, y: usize, residual: f64 },

    #[error("generator is not ergodic: kernel of L has dimension {0}")]
    NotErgodic(usize),

    #[error("{what} exceeds cap: {size} > {cap}")]
    CapExceeded { what: &'static str, size: usize, cap: usize },

    #[error("functional is not normalized: mean {mean:e}, variance {variance}")]
    NotNormalized { mean: f64, variance: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("missing constant: {0}")]
    MissingConstant(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
