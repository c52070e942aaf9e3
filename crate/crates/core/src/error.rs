use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad argument values, shapes or ranges.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent or incomplete configuration (missing checkpoint stage, unknown kind, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A training loss became NaN or infinite; the snapshot path holds the offending batch.
    #[error("non-finite loss at step {step} ({term}); batch snapshot written to {snapshot:?}")]
    NonFinite {
        step: usize,
        term: String,
        snapshot: Option<PathBuf>,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the caller (exit code 1 / HTTP 400) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail_validation {
    ($($arg:tt)*) => {
        return Err($crate::Error::Validation(format!($($arg)*)))
    };
}
pub(crate) use bail_validation;
