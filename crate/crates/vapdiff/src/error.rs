use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vapdiff_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: image: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("training aborted at step {step}: {reason} (last good checkpoint: {checkpoint})")]
    TrainingAborted { step: u64, reason: String, checkpoint: String },
    #[error("describe aborted: {failed} of {attempted} images failed")]
    DescribeAborted { failed: usize, attempted: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    pub fn config(reason: impl Into<String>) -> Self {
        Error::Config(reason.into())
    }

    /// Process exit code: 1 invalid input, 2 runtime or numeric failure, 3 external service.
    pub fn exit_code(&self) -> i32 {
        use vapdiff_core::Error as C;
        match self {
            Error::Core(C::Transport(_) | C::Protocol(_)) | Error::DescribeAborted { .. } => 3,
            Error::Core(C::Numeric { .. }) | Error::Io { .. } | Error::TrainingAborted { .. } => 2,
            Error::Core(_) | Error::Parse { .. } | Error::Config(_) | Error::Image { .. } => 1,
        }
    }
}
