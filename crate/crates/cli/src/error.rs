use std::path::PathBuf;

use karcher_merge::ErrorCategory;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("recipe {}: {message}", path.display())]
    Recipe { path: PathBuf, message: String },
    #[error("{what} {}: {message}", path.display())]
    Spec {
        what: &'static str,
        path: PathBuf,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] karcher_merge::Error),
}

impl CliError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CliError::Recipe { .. } | CliError::Spec { .. } => ErrorCategory::Config,
            CliError::Core(e) => e.category(),
        }
    }

    /// 1 config, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
