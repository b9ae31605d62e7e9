use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("time {t} outside [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("singular coefficient {what} at t = {t} (denominator {denominator:e})")]
    Singularity {
        what: &'static str,
        t: f64,
        denominator: f64,
    },

    #[error("unsupported input: {0}")]
    UnsupportedInput(String),

    #[error("price path is not a martingale (max |z| = {max_z:.2})")]
    NonMartingalePrice { max_z: f64 },

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("infeasible observation: {0}")]
    InfeasibleObservation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("market clearing violated at step {step}: relative residual {residual:e}")]
    ClearingViolation { step: usize, residual: f64 },

    #[error("diagnostic failure: {0}")]
    Diagnostic(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}
