use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state must be strictly positive (species {species}, index {index}, value {value})")]
    NonPositiveState {
        species: usize,
        index: usize,
        value: f64,
    },

    #[error("detailed balance violated for pair ({i}, {j}): pi_i d_ij = {lhs}, pi_j d_ji = {rhs}")]
    DetailedBalance { i: usize, j: usize, lhs: f64, rhs: f64 },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("linear solve did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolveFailed { residual: f64, iterations: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("run aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
