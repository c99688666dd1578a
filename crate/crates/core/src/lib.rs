//! Data handling, preprocessing, augmentation, fusion and evaluation for
//! multi-resolution dermoscopic lesion classification.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type for callers that do not care.

pub mod augment;
pub mod catalog;
pub mod error;
pub mod evaluator;
pub mod fsutil;
pub mod fusion;
pub mod plan;
pub mod predictions;
pub mod preprocess;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use augment::{orbit, DihedralElement, Rotation};
pub use catalog::{load_manifest, DatasetManifest, ImageRecord, Label, Split};
pub use error::{Error, Result, ShapeError};
pub use evaluator::{evaluate_table, roc_auc, BinaryTask, EvalReport, RocCurve};
pub use fusion::{average_tables, FusionGraph, FusionLevel, FusionNode};
pub use plan::{Architecture, Cell, MatrixAxes, OptimizerKind, Resolution};
pub use predictions::{PredictionTable, ProbabilityVector};
pub use preprocess::{PreprocessConfig, PreprocessedTensor};
pub use scalar::{CompensatedSum, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ProbabilityVector32 = ProbabilityVector<f32>;
pub type ProbabilityVector64 = ProbabilityVector<f64>;
pub type PredictionTable32 = PredictionTable<f32>;
pub type PredictionTable64 = PredictionTable<f64>;
