use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{origin}:{line}: `{key}`: {detail}")]
    Config {
        origin: String,
        line: usize,
        key: String,
        detail: String,
    },
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] csi_core::CsiError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Report { path: PathBuf, detail: String },
}

impl BenchError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Invalid(_) => 1,
            _ => 2,
        }
    }
}
