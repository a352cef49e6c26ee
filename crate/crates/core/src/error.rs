use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("row not stochastic: {what} row {row} sums to {sum}")]
    RowNotStochastic { what: &'static str, row: usize, sum: f64 },

    #[error("negative probability {value} in {what} at index {index}")]
    NegativeProbability {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("discount out of range: {0} (need 0 < gamma < 1)")]
    DiscountOutOfRange(f64),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-positive entry {value} at index {index} where a strictly positive value is required")]
    NonPositive { index: usize, value: f64 },

    #[error("non-finite value at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("{0} is not supported for this operation")]
    Unsupported(String),

    #[error("projection did not reach tolerance {tol} after {iterations} iterations (best residual {residual})")]
    ProjectionFailed { tol: f64, iterations: usize, residual: f64 },

    #[error("zero behavior probability at step {0}")]
    ZeroBehaviorProbability(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
