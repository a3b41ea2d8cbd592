use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Unsupported,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("model is not stationary: {0}")]
    NonStationary(String),

    #[error("rank-deficient problem: {0}")]
    RankDeficient(String),

    #[error("optimizer did not converge after {evaluations} evaluations (best objective {objective:.6e})")]
    NotConverged {
        evaluations: usize,
        objective: f64,
        best: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Row { .. }
            | Error::Empty(_)
            | Error::InvalidInput(_)
            | Error::Parse { .. }
            | Error::Invariant(_)
            | Error::Io(_) => ErrorClass::Input,
            Error::Unsupported(_) | Error::NonStationary(_) => ErrorClass::Unsupported,
            Error::RankDeficient(_) | Error::NotConverged { .. } | Error::Numerical(_) => {
                ErrorClass::Numerical
            }
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
