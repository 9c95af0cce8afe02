use gazecast_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GazeError {
    /// True for failures caused by unreadable or inconsistent input files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            GazeError::Data(_)
                | GazeError::Checkpoint(_)
                | GazeError::Io(_)
                | GazeError::Json(_)
                | GazeError::Tensor(TensorError::Corrupt(_) | TensorError::Truncated | TensorError::Io(_))
        )
    }
}

pub type Result<T, E = GazeError> = std::result::Result<T, E>;
