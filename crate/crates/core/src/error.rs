use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("time grid invalid: {0}")]
    InvalidGrid(String),

    #[error("covariance Q(T) + Q~ is not injective on mode {mode} (q(T) + mu~ = 0)")]
    NotInjective { mode: usize },

    #[error("observed covariance block is singular (smallest eigenvalue {smallest:e}, trace {trace:e})")]
    SingularObservation { smallest: f64, trace: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] IoError),
}

/// `std::io::Error` wrapper so that [`Error`] stays `Clone + PartialEq`.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("i/o error: {0}")]
pub struct IoError(pub String);

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(IoError(e.to_string()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
