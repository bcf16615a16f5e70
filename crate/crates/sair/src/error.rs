use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, SairError>;

#[derive(Debug, thiserror::Error)]
pub enum SairError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("mask generation failed: {0}")]
    Generation(String),

    #[error("loss became non-finite at step {step}; diagnostics written to {dump}")]
    NonFiniteLoss { step: u64, dump: PathBuf },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("safetensors: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl SairError {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        SairError::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SairError::Io {
            path: path.into(),
            source,
        }
    }
}
