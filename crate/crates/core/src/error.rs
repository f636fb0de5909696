use thiserror::Error;

/// Errors raised by the numerical kernels and experiment drivers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("share vector violates the open simplex: {0}")]
    SimplexViolation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("integration produced a non-finite value: {0}")]
    IntegrationFailure(String),

    #[error("inversion did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("could not invert transform: {0}")]
    InversionFailure(String),

    #[error("root not bracketed: {0}")]
    RootNotBracketed(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("solution is not unique: {0}")]
    NonUnique(String),

    #[error("not identified: {0}")]
    NotIdentified(String),

    #[error("treatment not in the fitted support: {0}")]
    UnknownTreatment(String),
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IntegrationFailure(_)
                | Error::NoConvergence { .. }
                | Error::InversionFailure(_)
                | Error::RootNotBracketed(_)
                | Error::NonUnique(_)
                | Error::NotIdentified(_)
                | Error::InsufficientData(_)
        )
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            got,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
