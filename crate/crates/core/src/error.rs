use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("unseen category {label:?} for feature {feature}")]
    UnseenCategory { feature: String, label: String },

    #[error("category code {code} out of range for feature {feature}")]
    CodeOutOfRange { feature: String, code: f64 },

    #[error("dataset too small: {0}")]
    TooSmall(String),

    #[error("zero-norm vector in cosine distance")]
    ZeroNorm,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported loss/activation pairing: {0}")]
    Unsupported(String),

    #[error("class {0} unseen when the estimator was fitted")]
    UnseenClass(i64),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("no eligible feature left to select")]
    NoEligibleFeature,

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
