use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("header/payload disagreement: {0}")]
    HeaderMismatch(String),

    #[error("input is not a normalized distribution (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("invalid model state: {0}")]
    State(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::BadMagic { .. } => "bad_magic",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::BadHeader(_) => "bad_header",
            Error::HeaderMismatch(_) => "header_mismatch",
            Error::NotNormalized { .. } => "not_normalized",
            Error::State(_) => "state",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
