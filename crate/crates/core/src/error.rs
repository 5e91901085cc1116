use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. The numeric code is stable and is what the CLI
/// prints as the `E<nnn>` prefix.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error in {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("dataset schema error: {0}")]
    Schema(String),

    #[error("unknown scene label `{0}`")]
    UnknownScene(String),

    #[error("missing fusion bank for scene `{0}`")]
    MissingBank(String),

    #[error("empty input for {0}")]
    Empty(&'static str),

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable error code used by the CLI's `E<nnn>` prefix.
    pub fn code(&self) -> u32 {
        match self {
            Error::ShapeMismatch { .. } => 101,
            Error::InvalidArgument { .. } => 102,
            Error::NonFinite(_) => 103,
            Error::Io { .. } => 201,
            Error::Checkpoint { .. } => 202,
            Error::Schema(_) => 203,
            Error::UnknownScene(_) => 301,
            Error::MissingBank(_) => 302,
            Error::Empty(_) => 303,
            Error::Config(_) => 304,
        }
    }
}
