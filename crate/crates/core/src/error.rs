use std::path::PathBuf;

use thiserror::Error;

/// Tensor or image shape violation.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {path} (row {row}): {message}")]
    Schema { path: PathBuf, row: usize, message: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Shape(#[from] ShapeError),

    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("decode error for {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("coverage mismatch: {message}; missing ids: {missing:?}")]
    Coverage { message: String, missing: Vec<String> },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn with_image(self, image_id: &str) -> Self {
        Error::Image { image_id: image_id.to_string(), source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
