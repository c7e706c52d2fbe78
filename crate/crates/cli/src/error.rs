use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] cpp_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 usage, 2 validation, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        use cpp_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Core(e) => match e {
                E::Parse(_)
                | E::InvalidMap(_)
                | E::InvalidScenario(_)
                | E::Config(_)
                | E::EmptyTargets(_)
                | E::MaskViolation { .. }
                | E::Checkpoint(_)
                | E::Json(_) => 2,
                _ => 3,
            },
            CliError::Io { .. } => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            2 => "validation",
            _ => "runtime",
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
