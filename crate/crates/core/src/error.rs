use thiserror::Error;

use crate::net::Model;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate cell: {0}")]
    DegenerateCell(String),

    #[error("cell violates the reduced-angle window [60, 120]: {0}")]
    NiggliViolation(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("time {0} is outside the schedule domain [0, 1)")]
    Schedule(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{n} atoms exceeds the network capacity of {cap}")]
    Capacity { n: usize, cap: usize },

    #[error("integration failed at step {step}: {reason}")]
    Integration { step: usize, reason: String },

    #[error("paired lists differ in length ({0} vs {1})")]
    Pairing(usize, usize),

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<Model>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Validation-type failures map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Domain(_)
                | Error::DegenerateCell(_)
                | Error::NiggliViolation(_)
                | Error::Range(_)
                | Error::InsufficientData(_)
                | Error::Data(_)
                | Error::Config(_)
                | Error::Capacity { .. }
                | Error::Pairing(..)
                | Error::Format(_)
        )
    }
}
