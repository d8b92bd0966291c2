use thiserror::Error;

/// Errors raised by model construction, evaluation and fitting.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square: {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular or ill-conditioned system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("spectral radius not below one: {0}")]
    NotTerminating(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("observation ({n1}, {n2}) has zero probability under the current parameters")]
    ZeroProbability { n1: u64, n2: u64 },

    #[error("value {value} is not on the lattice {c}N + {k}")]
    OffLattice { value: f64, c: f64, k: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
