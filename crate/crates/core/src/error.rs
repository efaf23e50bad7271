use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("near-zero denominator at index {index} (|b| = {magnitude:e} < eps = {eps:e})")]
    NearZeroDenominator {
        index: usize,
        magnitude: f64,
        eps: f64,
    },

    #[error("frame was discarded: {0}")]
    Discarded(String),

    #[error("calibration failed for class {class}: {reason}")]
    Calibration { class: usize, reason: String },

    #[error("degenerate Weibull fit: {0}")]
    DegenerateFit(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::NearZeroDenominator { .. } => "near-zero-denominator",
            Error::Discarded(_) => "discarded",
            Error::Calibration { .. } => "calibration",
            Error::DegenerateFit(_) => "degenerate-fit",
            Error::Format(_) => "format",
            Error::ModelMismatch(_) => "model-mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
