use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while reading or writing an LMK1 container. Each variant maps to
/// a stable numeric code so foreign callers can branch on it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("payload size mismatch for {key}: header implies {expected} bytes, found {actual}")]
    PayloadSizeMismatch {
        key: String,
        expected: usize,
        actual: usize,
    },
    #[error("duplicate tensor key {0}")]
    DuplicateKey(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("inconsistent task order: {0}")]
    InconsistentTasks(String),
}

impl ContainerError {
    pub fn code(&self) -> i32 {
        match self {
            ContainerError::BadMagic => 10,
            ContainerError::Truncated(_) => 11,
            ContainerError::PayloadSizeMismatch { .. } => 12,
            ContainerError::DuplicateKey(_) => 13,
            ContainerError::BadHeader(_) => 14,
            ContainerError::InconsistentTasks(_) => 15,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero matrix has no effective rank")]
    ZeroSpectrum,
    #[error("undefined misalignment: sensitivity profile has zero norm")]
    UndefinedMisalignment,
    #[error("preference is not on the simplex: {0}")]
    OffSimplex(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("optimization diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable numeric code, shared with the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 2,
            Error::Shape(_) => 3,
            Error::ZeroSpectrum => 4,
            Error::UndefinedMisalignment => 5,
            Error::OffSimplex(_) => 6,
            Error::InvalidDistribution(_) => 7,
            Error::Invalid(_) => 8,
            Error::Divergence(_) => 9,
            Error::Container(e) => e.code(),
            Error::Io(_) => 20,
            Error::Json(_) => 21,
            Error::Csv(_) => 22,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
