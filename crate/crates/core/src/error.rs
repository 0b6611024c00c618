use thiserror::Error;

pub type Result<T> = std::result::Result<T, HsdmError>;

#[derive(Error, Debug)]
pub enum HsdmError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

impl HsdmError {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        HsdmError::Precondition(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HsdmError::InvalidParameter(msg.into())
    }
}
