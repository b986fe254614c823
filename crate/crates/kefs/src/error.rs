use std::io;
use std::path::{Path, PathBuf};

/// Everything the CLI can fail with, mapped onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum KefsError {
    #[error(transparent)]
    Core(#[from] kefs_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<KefsError> },
}

pub type Result<T> = std::result::Result<T, KefsError>;

pub mod exit {
    pub const CONFIG: i32 = 2;
    pub const INPUT: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const IO: i32 = 5;
}

impl KefsError {
    pub fn exit_code(&self) -> i32 {
        use kefs_core::Error as E;
        match self {
            KefsError::Core(E::Config(_)) | KefsError::Config(_) => exit::CONFIG,
            KefsError::Core(E::Training { .. }) => exit::DIVERGED,
            KefsError::Core(_) | KefsError::Parse { .. } | KefsError::Checkpoint { .. } => exit::INPUT,
            KefsError::Io { .. } => exit::IO,
            KefsError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn in_stage(stage: &'static str) -> impl FnOnce(KefsError) -> KefsError {
        move |e| KefsError::Stage { stage, source: Box::new(e) }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        KefsError::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, message: impl ToString) -> Self {
        KefsError::Parse { path: path.to_path_buf(), message: message.to_string() }
    }

    pub fn checkpoint(path: &Path, message: impl ToString) -> Self {
        KefsError::Checkpoint { path: path.to_path_buf(), message: message.to_string() }
    }
}
