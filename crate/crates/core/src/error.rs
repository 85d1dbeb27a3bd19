use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SrmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("subject {subject}, run {run}: {source}")]
    Run {
        subject: usize,
        run: usize,
        #[source]
        source: Box<SrmError>,
    },

    #[error("fold (run {run}, subject {subject}): {source}")]
    Fold {
        run: usize,
        subject: usize,
        #[source]
        source: Box<SrmError>,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl SrmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SrmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SrmError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_run(self, subject: usize, run: usize) -> Self {
        match self {
            e @ SrmError::Run { .. } => e,
            e => SrmError::Run {
                subject,
                run,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, SrmError>;
