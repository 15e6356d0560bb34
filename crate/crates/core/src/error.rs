use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scheme violation: {0}")]
    SchemeViolation(String),

    #[error("signature payload needs {needed} bits but only {available} channels are available")]
    Capacity { needed: usize, available: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("ownership file belongs to a different model (expected fingerprint {expected}, found {found})")]
    Fingerprint { expected: String, found: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
