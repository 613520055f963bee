use std::path::{Path, PathBuf};

/// Errors surfaced by the file formats and the command layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Rejected before any compute: bad config field, flag or input layout.
    #[error("config error: {0}")]
    Config(String),
    /// A core contract violated while validating inputs.
    #[error("invalid input: {0}")]
    Invalid(vssl_core::Error),
    #[error(transparent)]
    Core(#[from] vssl_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            _ => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
