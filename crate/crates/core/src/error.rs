use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty labeled split: ratio {ratio} of {n} samples rounds to zero")]
    EmptyLabeledSplit { ratio: f64, n: usize },
    #[error("pseudo-label predictions missing for ids {0:?}")]
    MissingIds(Vec<u64>),
    #[error("no confidence available: coordinate regression does not output confidence")]
    NoConfidence,
    #[error("task config rejected: {0}")]
    Config(String),
    #[error("non-finite gradient in {0}")]
    NonFinite(String),
    #[error("stale cache: produced by model version {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
