use msved_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, MsvedError>;

#[derive(Debug, Error)]
pub enum MsvedError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown tag category `{0}`")]
    UnknownCategory(String),
    #[error("unknown label `{label}` for tag category `{category}`")]
    UnknownLabel { category: String, label: String },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MsvedError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        MsvedError::Io {
            context: context.into(),
            source,
        }
    }
}
