use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix of dimension {dim} is not positive definite (largest jitter tried {max_jitter:e})")]
    NotPositiveDefinite { dim: usize, max_jitter: f64 },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding carries no forward trace")]
    TraceMissing,
    #[error("instance of size {size} exceeds the dense reference cap of {cap}")]
    InstanceTooLarge { size: usize, cap: usize },
    #[error("parameter view has {params} entries but gradient view has {grads}")]
    ShapeMismatch { params: usize, grads: usize },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("series of length {len} is too short, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("no parameters stored for patient `{0}`")]
    UnknownPatient(String),
    #[error("Newton iteration did not converge within {0} iterations")]
    NewtonDivergence(usize),
    #[error("predictive variance {0:e} is negative beyond round-off")]
    NegativeVariance(f64),
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;
