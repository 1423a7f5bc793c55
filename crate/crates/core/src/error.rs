use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid operator: {0}")]
    Operator(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("size guard: {0}")]
    SizeGuard(String),
    #[error("numerical inconsistency: {0}")]
    Inconsistent(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
