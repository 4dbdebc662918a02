use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("noise strength {0} outside the allowed range")]
    NoiseOutOfRange(f64),

    #[error("unknown boundary label `{0}`")]
    UnknownLabel(String),

    #[error("vector has weight outside the charge-neutral replica sector")]
    OutsideSector,

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("non-finite tensor data at site {0}")]
    NonFinite(usize),

    #[error("system size {n} exceeds the dense cap of {cap} sites")]
    SizeCap { n: usize, cap: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("no crossing between the supplied curves")]
    NoCrossing,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}
