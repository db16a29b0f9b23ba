use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line count mismatch: source has {source_lines} lines, target has {target_lines}")]
    LineCountMismatch { source_lines: usize, target_lines: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("parameter store mismatch: {0}")]
    StoreMismatch(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: u64, diagnostic: String },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
