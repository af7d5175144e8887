use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed CSV at row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("non-positive or non-finite glucose {value} at row {row}")]
    InvalidGlucose { row: usize, value: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("zero variance in standardization data")]
    ZeroVariance,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("explosive AR polynomial: coefficients {0:?} are not stationary")]
    Explosive(Vec<f64>),

    #[error("all ARIMA candidate fits failed: {0}")]
    AllCandidatesFailed(String),

    #[error("no common forecast origins across models: {0}")]
    EmptyAlignment(String),

    #[error("ensemble members use different standardizers")]
    MixedStandardizers,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
