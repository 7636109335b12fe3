use std::io;
use std::path::PathBuf;
use std::time::Duration;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const VERIFICATION: u8 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vtprune_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest {}: {reason}", path.display())]
    ManifestParse { path: PathBuf, reason: String },
    #[error("tensor {}: expected {expected} bytes, found {actual}", file.display())]
    TensorSizeMismatch { file: PathBuf, expected: u64, actual: u64 },
    #[error("shape inconsistency: {0}")]
    ShapeInconsistency(String),
    #[error("config {}: {reason}", path.display())]
    ConfigParse { path: PathBuf, reason: String },
    #[error("scorer did not answer within {0:?}")]
    Timeout(Duration),
    #[error("scorer returned a malformed score: {0:?}")]
    MalformedScore(String),
    #[error("scorer process exited ({})", .0.map_or("killed by signal".to_string(), |c| format!("code {c}")))]
    ProcessExit(Option<i32>),
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) => exit::USAGE,
            Error::Verification(_) => exit::VERIFICATION,
            _ => exit::DATA,
        }
    }
}
