use thiserror::Error;

/// Errors raised while constructing or combining models.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("clock modulus must be positive")]
    ZeroModulus,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not stochastic: {0}")]
    NonStochastic(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("observation set is not recurrent: closed class {0:?} never visits it")]
    LambdaNotRecurrent(Vec<usize>),
    #[error("G block for (gamma={gamma}, delta={delta}) is numerically singular (cond {cond:e})")]
    SingularG { gamma: usize, delta: usize, cond: f64 },
    #[error("solution is not feasible (status {0})")]
    NotFeasible(String),
    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
