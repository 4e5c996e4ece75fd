use thiserror::Error;

use crate::integrator::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} ensembles, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// A closed-form expression was asked for outside the region where it holds.
    #[error("outside formula domain: {0}")]
    OutOfDomain(String),

    /// The step budget ran out. The trajectory sampled so far is attached.
    #[error("integration budget of {max_steps} steps exhausted at t = {t}")]
    BudgetExhausted {
        max_steps: usize,
        t: f64,
        partial: Box<Trajectory>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid bracket: {0}")]
    InvalidBracket(String),

    #[error("resource cap exceeded: {0}")]
    Resource(String),

    #[error("eigensolver failed: {0}")]
    Solver(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
