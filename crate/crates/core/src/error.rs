use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("ill-conditioned stain matrix (condition estimate {condition:.3e})")]
    IllConditionedStainMatrix { condition: f64 },

    #[error("unknown stain `{0}`")]
    UnknownStain(String),

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("M/V-Index undefined: no epithelium in the evaluated region")]
    UndefinedIndex,

    #[error("field {index} has {mc} mitoses but zero epithelium")]
    InconsistentField { index: usize, mc: u64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("manifest not found: {}", .0.display())]
    ManifestNotFound(PathBuf),

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
