use imf_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("numeric failure at step {step}: {what}")]
    Numeric { step: usize, what: String },
    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> LabError {
    LabError::Contract(msg.into())
}
