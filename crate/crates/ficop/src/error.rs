use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, FicopError>;

#[derive(Debug, thiserror::Error)]
pub enum FicopError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("insufficient correspondences: have {have}, need {need}")]
    Insufficient { have: usize, need: usize },

    #[error("empty match set: {0}")]
    EmptyMatch(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),
}

impl FicopError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FicopError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        FicopError::Format { path: path.into(), reason: reason.into() }
    }
}
