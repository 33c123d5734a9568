use std::path::PathBuf;

/// Errors produced anywhere in the editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid description: {0}")]
    InvalidDescription(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary hash mismatch: checkpoint expects {expected}, loaded vocabulary is {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
