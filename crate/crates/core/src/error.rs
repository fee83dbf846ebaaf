use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension or shape contract violated (zero-sized dim, rank mismatch, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// A hyperparameter or distribution parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file's bytes do not decode as the expected format (PGM, manifest CSV,
    /// weight store, checkpoint).
    #[error("parse error: {0}")]
    Parse(String),

    /// Dataset-level contract violation: duplicate paths, unknown labels,
    /// arm/label mismatch, impossible split request.
    #[error("data error: {0}")]
    Data(String),

    /// Training-time failure such as a non-finite loss.
    #[error("train error: {0}")]
    Train(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
