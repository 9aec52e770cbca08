use thiserror::Error;

pub type Result<T> = std::result::Result<T, HmmError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HmmError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("observation at t={t} has zero density under every state")]
    DegenerateLikelihood { t: usize },

    #[error("positive posterior weight {weight} on structurally impossible {what} at t={t}")]
    MaskedWeight {
        t: usize,
        what: &'static str,
        weight: f64,
    },

    #[error("transition matrix has no stationary distribution: {0}")]
    NoStationaryDistribution(String),

    #[error("non-finite gradient at t={t}, coordinate {coordinate}")]
    NonFiniteGradient { t: usize, coordinate: usize },

    #[error("Lipschitz estimate exceeded the doubling cap at t={t} (estimate {estimate:e})")]
    LipschitzCap { t: usize, estimate: f64 },

    #[error("M step failed to satisfy the acceptance test after {attempts} attempts at outer iteration {k}")]
    AttemptCap { k: usize, attempts: usize },
}

impl HmmError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        HmmError::Config(msg.into())
    }
}
