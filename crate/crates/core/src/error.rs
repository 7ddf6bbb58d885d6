use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum MatrError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    Divergence { step: u64 },

    #[error("empty alignment path")]
    EmptyPath,

    #[error("no candidate segments to select from")]
    NoPrediction,

    #[error("unknown ids in predictions: {0:?}")]
    UnknownIds(Vec<String>),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MatrError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MatrError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MatrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        MatrError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            MatrError::Shape { .. } => "shape",
            MatrError::InvalidArgument(_) => "invalid_argument",
            MatrError::NonScalarLoss(_) => "non_scalar_loss",
            MatrError::NonFiniteGradient(_) => "non_finite_gradient",
            MatrError::Divergence { .. } => "divergence",
            MatrError::EmptyPath => "empty_path",
            MatrError::NoPrediction => "no_prediction",
            MatrError::UnknownIds(_) => "unknown_ids",
            MatrError::Format { .. } => "format",
            MatrError::Version(_) => "version",
            MatrError::Io { .. } => "io",
            MatrError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, MatrError>;
