use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("preprocessing incomplete: {0}")]
    PreprocessingIncomplete(String),

    #[error("service error: {0}")]
    Service(String),

    #[error("determinism error: {0}")]
    Determinism(String),

    #[error("keyword extraction failed: {0}")]
    Extraction(String),

    #[error("cannot parse service response {raw:?}: {message}")]
    ResponseParse { raw: String, message: String },

    #[error("rendered text does not fit: {0}")]
    RenderOverflow(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("input error for {id}: {message}")]
    Input { id: String, message: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::CheckpointIncompatible(_) => 2,
            Error::PreprocessingIncomplete(_) => 3,
            Error::Service(_) | Error::Extraction(_) | Error::ResponseParse { .. } => 4,
            Error::Determinism(_) => 5,
            _ => 1,
        }
    }
}
