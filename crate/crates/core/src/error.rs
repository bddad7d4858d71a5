use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("thinning envelope violated at t={time}: hazard {hazard} exceeds envelope {envelope}")]
    EnvelopeViolation { time: f64, hazard: f64, envelope: f64 },

    #[error("count overflow at t={0}")]
    Overflow(f64),

    #[error("quadrature did not reach tolerance on interval [{start}, {end}]")]
    Quadrature { start: f64, end: f64 },

    #[error("limit solver unstable at t={time}: {what} = {value}; retry with a smaller step")]
    Instability { time: f64, what: &'static str, value: f64 },

    #[error("inconsistent event log: {0}")]
    InconsistentLog(String),

    #[error("optimizer failed after {iterations} iterations: {reason}")]
    Divergence { iterations: usize, reason: String },

    #[error("truncated state space too small: lost mass {lost:e} >= {epsilon:e}; try caps {suggested:?}")]
    CapsTooSmall { lost: f64, epsilon: f64, suggested: (u64, u64, u64) },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EnvelopeViolation { .. }
                | Error::Overflow(_)
                | Error::Quadrature { .. }
                | Error::Instability { .. }
                | Error::Divergence { .. }
                | Error::CapsTooSmall { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
