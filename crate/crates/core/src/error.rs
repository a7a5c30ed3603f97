use thiserror::Error;

/// Errors raised by the geometric, spectral and statistical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("quadrature did not converge: {what} (achieved error bound {achieved:e})")]
    Quadrature { what: String, achieved: f64 },

    #[error("gram matrix ill-conditioned for p = {p}, n = {degree}: condition number {condition:e}")]
    Conditioning { p: u32, degree: u32, condition: f64 },

    #[error("truncation tail {tail:e} exceeds tolerance {tolerance:e}; increase the truncation size")]
    Truncation { tail: f64, tolerance: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("root finder did not converge (worst residual {worst_residual:e})")]
    NonConvergence { worst_residual: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for errors caused by invalid input or configuration rather than by numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Precondition(_)
                | Error::DimensionMismatch { .. }
                | Error::Degenerate(_)
                | Error::Unsupported(_)
                | Error::Validation(_)
        )
    }
}
