//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unparseable pain score: {0:?}")]
    UnparseablePain(String),

    #[error("episode {0:?} has no events")]
    EmptyEpisode(String),

    #[error("episode {admission_id:?} too short for transitions ({hours} hours, need >= 2)")]
    EpisodeTooShort { admission_id: String, hours: usize },

    #[error("insufficient data: have {have} episodes, need at least {need}")]
    InsufficientData { have: usize, need: usize },

    #[error("negative dose {0} mg")]
    InvalidDose(f64),

    #[error("invalid window range: lo {lo} must be < hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("replay buffer not ready: {size} transitions < batch size {batch}")]
    BufferNotReady { size: usize, batch: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}")]
    Divergence { step: u64 },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 missing artifact,
    /// 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::Config(_)
            | Error::UnparseablePain(_)
            | Error::EmptyEpisode(_)
            | Error::EpisodeTooShort { .. }
            | Error::InsufficientData { .. }
            | Error::InvalidDose(_)
            | Error::InvalidRange { .. }
            | Error::DimensionMismatch { .. }
            | Error::Format { .. } => 2,
            Error::MissingArtifact(_) => 3,
            Error::NonFinite(_) | Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}
