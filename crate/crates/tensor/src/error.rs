use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("invalid parameter for {op}: {msg}")]
    Parameter { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension { op, msg: msg.into() })
}
