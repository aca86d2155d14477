use thiserror::Error;

pub type Result<T> = std::result::Result<T, AuctionError>;

#[derive(Debug, Error)]
pub enum AuctionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cost function violates shape requirements: {0}")]
    InvalidCost(String),

    #[error("value {value} lies outside the support [{lower}, {upper}]")]
    OutsideSupport { value: f64, lower: f64, upper: f64 },

    #[error("density vanishes at {0}; virtual valuation undefined")]
    ZeroDensity(f64),

    #[error("target {target} exceeds the largest virtual valuation {max} on the support")]
    OutOfRange { target: f64, max: f64 },

    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("distribution is not regular: {0}")]
    Irregular(String),

    #[error("internal consistency failure: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AuctionError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AuctionError::Internal(_) => 3,
            AuctionError::Io(_) => 1,
            _ => 2,
        }
    }
}
