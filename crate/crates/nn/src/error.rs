use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dermres_core::Error),

    #[error("weight store: {0}")]
    WeightStore(String),

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum { path: PathBuf, expected: String, found: String },

    /// An upstream stage has not produced what this one needs.
    #[error("missing prerequisite: run `{stage}` first ({detail})")]
    Prerequisite { stage: &'static str, detail: String },

    #[error("run {run_id}: non-finite loss at epoch {epoch}")]
    Divergence { run_id: String, epoch: usize },

    #[error("inference on {context}: non-finite logits")]
    Inference { context: String },

    #[error("run {run_id} is locked by {holder}")]
    Locked { run_id: String, holder: String },
}

impl From<dermres_core::ShapeError> for Error {
    fn from(e: dermres_core::ShapeError) -> Self {
        Error::Core(e.into())
    }
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Core(dermres_core::Error::Contract(msg.into()))
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Core(dermres_core::Error::Config(msg.into()))
    }

    pub fn io(path: impl Into<PathBuf>, e: std::io::Error) -> Self {
        Error::Core(dermres_core::Error::io(path, e))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
