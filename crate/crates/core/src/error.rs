use thiserror::Error;

/// Errors raised by the planning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("integration blow-up at t = {time}: {reason}")]
    BlowUp { time: f64, reason: String },
    #[error("covariance lost positive semi-definiteness at t = {time} (min eigenvalue {min_eig:e})")]
    NotPsd { time: f64, min_eig: f64 },
    #[error("time {0} outside the control horizon")]
    OutOfHorizon(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model validity breach: {0}")]
    ModelBreach(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
