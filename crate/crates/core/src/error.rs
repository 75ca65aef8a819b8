use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown point index {0}")]
    UnknownPoint(usize),

    #[error("unknown cube id {0}")]
    UnknownCube(usize),

    #[error("radius must be nonnegative, got {0}")]
    NegativeRadius(f64),

    #[error("V(x, y) is undefined on the diagonal (point {0})")]
    Diagonal(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cube {0} has no member points")]
    EmptyCube(usize),

    #[error("measure vanishes: {0}")]
    ZeroMeasure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no admissible configuration: {0}")]
    NoAdmissible(String),

    #[error(
        "power iteration did not converge after {iterations} iterations; \
         norm lies in [{lower}, {upper}]"
    )]
    NotConverged {
        iterations: usize,
        lower: f64,
        upper: f64,
    },

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("unknown verification mode `{0}`")]
    UnknownMode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
