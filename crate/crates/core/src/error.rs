use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("code {code} out of range for {bits}-bit quantizer")]
    CodeOutOfRange { code: u32, bits: u32 },

    #[error("negative input {0} to logarithmic quantizer")]
    NegativeInput(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown layer id {0}")]
    UnknownLayer(usize),

    #[error("layer {0} is not quantizable")]
    NotQuantizable(usize),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("instance too large for exhaustive search: {0} assignments")]
    TooLarge(u128),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("spec hash mismatch: expected {expected}, found {found}")]
    SpecHashMismatch { expected: String, found: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
