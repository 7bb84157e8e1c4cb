use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config field '{field}': {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Core(#[from] phmat_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("artifact: {0}")]
    Artifact(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config_err(field: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config { field: field.to_string(), msg: msg.into() }
}
