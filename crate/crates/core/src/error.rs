use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range for {len} sites")]
    OutOfBounds { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("class {0} is empty in the reference labelling")]
    EmptyClass(usize),

    #[error("beta = {beta} lies outside the tabulated range [{lower}, {upper}]")]
    Extrapolation { beta: f64, lower: f64, upper: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum error: {0}")]
    Checksum(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
