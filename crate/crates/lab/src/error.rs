use std::io;
use std::path::Path;

/// Everything that can stop a run, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(#[from] sane_core::Error),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed file: {0}")]
    Format(String),
}

impl LabError {
    /// 2 for configuration problems, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Numeric(_) => 3,
            LabError::Io { .. } | LabError::Format(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        LabError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Reclassifies a library error raised while validating parameters.
    pub(crate) fn invalid_config(err: sane_core::Error) -> Self {
        LabError::Config(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
