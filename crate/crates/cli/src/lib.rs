//! Pipeline orchestration for multi-resolution lesion classification:
//! ingest, preprocess, train, predict, fuse, evaluate and report, driven by
//! a TOML configuration file.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use pipeline::RunOptions;
