use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("support {support} contains no grid point (grid too coarse?)")]
    EmptySupport { support: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("supports overlap: {first} and {second}")]
    Overlap { first: String, second: String },

    #[error("out of bounds: {what}")]
    OutOfBounds { what: String },

    #[error("partition {partition} has no supports")]
    EmptyPartition { partition: String },

    #[error("degenerate interval [{lo}, {hi}]")]
    DegenerateInterval { lo: f64, hi: f64 },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("covariance matrix is not positive definite even with jitter {jitter:e}")]
    CholeskyFailure { jitter: f64 },

    #[error("non-finite ELBO at iteration {iteration}")]
    NonFiniteElbo { iteration: usize },

    #[error("truth values are zero at indices {indices:?}")]
    ZeroTruth { indices: Vec<usize> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model is incompatible with dataset: {0}")]
    IncompatibleModel(String),

    #[error("unsupported model format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("fold {fold}: {source}")]
    Fold { fold: String, source: Box<Error> },

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures caused by the input data or configuration rather than numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::CholeskyFailure { .. } | Error::NonFiniteElbo { .. } => false,
            Error::Fold { source, .. } => source.is_validation(),
            _ => true,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptySupport { .. } => "EmptySupport",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Overlap { .. } => "OverlapError",
            Error::OutOfBounds { .. } => "OutOfBounds",
            Error::EmptyPartition { .. } => "EmptyPartition",
            Error::DegenerateInterval { .. } => "DegenerateInterval",
            Error::InvalidGeometry(_) => "InvalidGeometry",
            Error::CholeskyFailure { .. } => "CholeskyFailure",
            Error::NonFiniteElbo { .. } => "NonFiniteELBO",
            Error::ZeroTruth { .. } => "ZeroTruth",
            Error::Precondition(_) => "Precondition",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::IncompatibleModel(_) => "IncompatibleModel",
            Error::UnsupportedVersion { .. } => "UnsupportedVersion",
            Error::Fold { .. } => "FoldError",
            Error::Io(_) => "Io",
            Error::Parse(_) => "Parse",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
