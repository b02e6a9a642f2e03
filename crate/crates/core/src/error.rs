use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (max jitter {max_jitter:e} exhausted)")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("triangular matrix is singular: diagonal entry {index} is {value}")]
    SingularTriangular { index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("likelihood noise variance must be positive, got {0}")]
    NonPositiveNoise(f64),

    #[error("parse error at token {position}: unknown layer `{token}`")]
    Parse { token: String, position: usize },

    #[error("empty model specification")]
    EmptySpec,

    #[error("model specification must end with a GP layer")]
    NoFinalGp,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("natural gradient step rejected after {halvings} halvings")]
    StepRejected { halvings: usize },

    #[error("samples are degenerate (zero standard deviation)")]
    DegenerateSamples,

    #[error("sample is constant")]
    ConstantSample,

    #[error("sample size {0} outside the supported range [3, 5000]")]
    SizeOutOfRange(usize),

    #[error("file not found: {0}")]
    FileNotFound(String),

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("target column `{0}` not found")]
    MissingTarget(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
