use std::path::PathBuf;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Geometry,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: field `{field}`: {reason}")]
    Format {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("network spec mismatch: {0}")]
    Spec(String),

    #[error("non-finite {term} at scale {scale}, epoch {epoch}")]
    NonFinite {
        scale: usize,
        epoch: usize,
        term: &'static str,
    },

    #[error("non-finite value: {0}")]
    NotFinite(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Corrupt { .. } => ErrorCategory::Io,
            Error::Geometry(_) => ErrorCategory::Geometry,
            Error::Config(_) | Error::Spec(_) => ErrorCategory::Config,
            Error::NonFinite { .. } | Error::NotFinite(_) => ErrorCategory::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
