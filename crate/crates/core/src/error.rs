use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front-ends to pick exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller supplied an invalid parameter or combination of parameters.
    Usage,
    /// A plugin misbehaved, is missing, or failed its contract probe.
    Plugin,
    /// Input data is malformed, corrupt, stale or inconsistent.
    Data,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Plugin => "plugin",
            ErrorClass::Data => "data",
        }
    }

    /// Process exit code for this class: 2 usage, 3 plugin, 4 data.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Plugin => 3,
            ErrorClass::Data => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite value in {stage} at step t={step}")]
    NonFinite { stage: &'static str, step: usize },

    #[error("{what} fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no face found: {0}")]
    FaceNotFound(String),

    #[error("plugin error: {0}")]
    Plugin(String),

    #[error("plugin contract violation: {0}")]
    Contract(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn out_of_range(what: &'static str, detail: impl Into<String>) -> Self {
        Error::OutOfRange {
            what,
            detail: detail.into(),
        }
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::OutOfRange { .. } => ErrorClass::Usage,
            Error::Plugin(_) | Error::Contract(_) | Error::FaceNotFound(_) => ErrorClass::Plugin,
            Error::ShapeMismatch { .. }
            | Error::NonFinite { .. }
            | Error::FingerprintMismatch { .. }
            | Error::Version { .. }
            | Error::Corrupt(_)
            | Error::Parse { .. }
            | Error::Image(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorClass::Data,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
