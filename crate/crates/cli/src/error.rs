use std::path::PathBuf;

use dmegp_core::Error as CoreError;

/// Failures surfaced by the command-line tool, each with a fixed exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: line {line}: {reason}", path.display())]
    MalformedRow { path: PathBuf, line: u64, reason: String },
    #[error("{}: time_index of patient `{patient}` is not strictly increasing (line {line})", path.display())]
    NonMonotonicTime { path: PathBuf, patient: String, line: u64 },
    #[error("data error: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 2 for configuration, 3 for data, 4 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::InvalidConfig(_) => 2,
                CoreError::NotPositiveDefinite { .. }
                | CoreError::NewtonDivergence(_)
                | CoreError::NegativeVariance(_)
                | CoreError::NotSymmetric { .. }
                | CoreError::TraceMissing
                | CoreError::InstanceTooLarge { .. }
                | CoreError::ShapeMismatch { .. } => 4,
                _ => 3,
            },
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
