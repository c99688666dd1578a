//! CPU convolutional networks for lesion classification: ResNet-18/50 and
//! DenseNet-121 backbones with a replaced head, fine-tuning with a frozen
//! prefix, a resumable run registry and dihedral test-time augmentation.

pub mod blocks;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod predictor;
pub mod registry;
pub mod store;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use layers::Mode;
pub use model::{default_frozen_units, probe_batch, AdaptedModel, ModelConfig, NamedTensors, PartitionReport};
pub use optim::{softmax_cross_entropy, Optimizer, OptimizerSpec};
pub use predictor::{predict_dataset, tta_predict, Classifier, FeatureMemo, MemoizedModel};
pub use registry::{run_matrix, MatrixOptions, RunOutcome, RunRecord, RunRegistry, RunStatus};
pub use store::{ParamStore, Partition};
pub use trainer::{lr_at_epoch, train_run, AugmentPolicy, FeatureCache, RunResult, TrainConfig, TrainingSet};
pub use weights::{
    build_model, load_checkpoint, save_checkpoint, BackboneSpec, DirWeightStore, FallbackStore, RandomInitStore,
    WeightStore,
};

pub type AdaptedModel32 = AdaptedModel<f32>;
pub type AdaptedModel64 = AdaptedModel<f64>;
pub type TrainingSet32 = TrainingSet<f32>;
pub type TrainingSet64 = TrainingSet<f64>;
