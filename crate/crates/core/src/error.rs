use thiserror::Error;

/// Errors raised by schedule construction, operators, solvers and samplers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step {t} outside [0, {num_steps}]")]
    StepOutOfRange { t: usize, num_steps: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("FFT length mismatch: spectrum has {expected} entries, vector has {found}")]
    FftLength { expected: usize, found: usize },

    #[error("conjugate gradient stopped after {iterations} iterations at relative residual {residual:.3e}")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, found })
    }
}

pub(crate) fn check_finite(what: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
