use dtn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("undefined metric: {0}")]
    Metric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl DtnError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DtnError::Numeric(_) | DtnError::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = DtnError> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DtnError::Config(msg.into()))
}
