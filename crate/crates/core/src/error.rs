use thiserror::Error;

pub type Result<T> = std::result::Result<T, RsdError>;

#[derive(Debug, Error)]
pub enum RsdError {
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("matrix for component {component} is not symmetric positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite coordinate at step {step} (particle {particle})")]
    NonFinite { step: usize, particle: usize },

    #[error("particle {0} has a zero-norm feature vector")]
    ZeroNormFeature(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RsdError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        RsdError::InvalidParameter(msg.into())
    }
}
