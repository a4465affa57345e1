use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    Empty,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("non-finite value at index {idx}: {value}")]
    NonFinite { idx: usize, value: f64 },

    #[error("negative weight at index {idx}: {value}")]
    NegativeWeight { idx: usize, value: f64 },

    #[error("weights sum to zero")]
    ZeroMass,

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("marginals are not in convex order (min Q = {min_q:.3e}, Q(1) = {q_at_1:.3e})")]
    NotConvexOrder { min_q: f64, q_at_1: f64 },

    #[error("projection did not converge after {iterations} sweeps (step {step:.3e}, equality residual {residual:.3e})")]
    ProjectionStalled {
        iterations: usize,
        step: f64,
        residual: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
