use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("gradient check failed for {0}")]
    Gradcheck(String),
    #[error(transparent)]
    Core(#[from] synthdistill::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn checkpoint(path: &Path, reason: impl Into<String>) -> Self {
        Self::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// 1 usage/config, 2 numerical abort, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Checkpoint { .. } => 1,
            Self::Io { .. } => 3,
            Self::Gradcheck(_) => 2,
            Self::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &synthdistill::Error) -> i32 {
    match e {
        synthdistill::Error::NonFinite { .. } => 2,
        synthdistill::Error::Cell { source, .. } => core_exit_code(source),
        _ => 1,
    }
}
