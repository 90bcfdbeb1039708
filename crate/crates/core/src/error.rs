use thiserror::Error;

use crate::pgo::SolveReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// The calibration loss became non-finite. Carries the last finite iterate
    /// as `[bg_x, bg_y, bg_z, ba_x, ba_y, ba_z]`.
    #[error("optimizer diverged after {iterations} iterations")]
    Diverged { iterations: usize, last: [f64; 6] },

    #[error("solver failure: {reason}")]
    SolverFailure {
        reason: String,
        report: Box<SolveReport>,
    },

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
