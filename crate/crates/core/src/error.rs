use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("tape is stale: recorded against parameter version {recorded}, network is at {current}")]
    StaleTape { recorded: u64, current: u64 },

    #[error("NaN gradient for parameter `{param}` at index {index}")]
    NanGradient { param: String, index: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("run aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
