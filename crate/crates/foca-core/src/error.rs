use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum FocaError {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("point lies outside the unit ball (norm = {norm})")]
    OutsideBall { norm: f64 },

    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("label {label:?} has only {count} samples, need at least {need} for {need}-fold split")]
    TooFewSamples {
        label: String,
        count: usize,
        need: usize,
    },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("non-finite loss at fold {fold}, epoch {epoch}")]
    NonFiniteLoss { fold: usize, epoch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FocaError>;
