use thiserror::Error;

pub type Result<T> = std::result::Result<T, DetError>;

#[derive(Debug, Error)]
pub enum DetError {
    /// Configuration rejected at validation time; `field` is the dotted path
    /// of the offending entry.
    #[error("invalid config at `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("capability error: {0}")]
    Capability(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl DetError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        DetError::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
