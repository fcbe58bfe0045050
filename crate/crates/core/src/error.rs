use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("network is frozen (teacher role); gradient updates are rejected")]
    Frozen,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite loss at task {task}, epoch {epoch}")]
    Divergence { task: String, epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }
}
