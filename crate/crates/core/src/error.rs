use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown category id {0}")]
    UnknownCategory(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),

    #[error("severity {0} outside 0..=5")]
    Severity(u8),

    #[error("layout must contain at least one object")]
    EmptyLayout,

    #[error("prediction does not line up with scene: {0}")]
    Misaligned(String),

    #[error("split contains no ground-truth triplets")]
    NoGroundTruth,

    #[error("model has no gate fusion enabled")]
    GateModeAbsent,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("model format: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input files rather than a bug or a bad call.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Parse(_) | Error::Io(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
