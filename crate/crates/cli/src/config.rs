//! Pipeline configuration file (TOML).
//!
//! ```toml
//! [paths]
//! manifest = "data/manifest.csv"
//! cache_root = "work/cache"
//! weights = "weights"
//! runs = "work/runs"
//! predictions = "work/predictions"
//! reports = "work/reports"
//!
//! [matrix]
//! architectures = ["resnet18", "densenet121"]
//! resolutions = [64, 128]
//! optimizers = ["sgdm", "adam"]
//! repeats = [1, 2]
//! ```
//!
//! Relative paths resolve against the directory holding the file. Every
//! other section is optional and falls back to the standard recipe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dermres_core::fusion::FusionGraph;
use dermres_core::preprocess::{StageOrder, IMAGENET_MEAN_RGB};
use dermres_core::synth::SynthSpec;
use dermres_core::{Architecture, Cell, MatrixAxes, OptimizerKind, PreprocessConfig, Resolution};
use dermres_nn::trainer::default_batch_size;
use dermres_nn::{AugmentPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Overrides `paths.cache_root`.
pub const CACHE_ROOT_ENV: &str = "DERMRES_CACHE_ROOT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub cache_root: PathBuf,
    pub weights: PathBuf,
    pub runs: PathBuf,
    pub predictions: PathBuf,
    pub reports: PathBuf,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.manifest,
            &mut self.cache_root,
            &mut self.weights,
            &mut self.runs,
            &mut self.predictions,
            &mut self.reports,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub mean_rgb: [f64; 3],
    pub apply_color_constancy: bool,
    pub order: StageOrder,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { mean_rgb: IMAGENET_MEAN_RGB, apply_color_constancy: true, order: StageOrder::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Unset: 32 up to 224 px, 16 above.
    pub batch_size: Option<usize>,
    pub augment: AugmentPolicy,
    pub head_init_std: f64,
    pub weight_decay: f64,
    pub pretrained: bool,
    /// Per-worker budget for cached frozen-prefix features.
    pub feature_cache_mb: usize,
    /// Frozen prefix length by architecture id; unset uses the default.
    pub frozen_units: BTreeMap<String, usize>,
    /// Base learning rate by optimiser id; unset uses the standard value.
    pub base_lr: BTreeMap<String, f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr_drop_epochs: vec![5, 10],
            lr_drop_factor: 10.0,
            batch_size: None,
            augment: AugmentPolicy::default(),
            head_init_std: 1.0,
            weight_decay: 0.0,
            pretrained: true,
            feature_cache_mb: 1024,
            frozen_units: BTreeMap::new(),
            base_lr: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Row label for this pipeline in the comparison table.
    pub approach: String,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { approach: "three-level fusion (this run)".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    paths: Paths,
    synthetic: Option<SynthSpec>,
    matrix: Option<MatrixAxes>,
    #[serde(default)]
    preprocess: PreprocessSection,
    #[serde(default)]
    training: TrainingSection,
    #[serde(default)]
    evaluation: EvaluationSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    matrix: MatrixAxes,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Generate the dataset at `paths.manifest` during ingest.
    pub synthetic: Option<SynthSpec>,
    pub axes: MatrixAxes,
    pub preprocess: PreprocessSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

impl PipelineConfig {
    /// Parse `config`, optionally replacing its matrix with the one in `plan`.
    pub fn load(config: &Path, plan: Option<&Path>) -> Result<Self> {
        let text = read(config)?;
        let base = std::path::absolute(base_dir(config)).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
        let mut cfg = Self::from_toml(&text, &base)?;
        if let Some(plan) = plan {
            let raw: RawPlan =
                toml::from_str(&read(plan)?).map_err(|e| CliError::Config(format!("{}: {e}", plan.display())))?;
            cfg.axes = raw.matrix.normalized()?;
        }
        if let Some(root) = std::env::var_os(CACHE_ROOT_ENV).filter(|v| !v.is_empty()) {
            cfg.paths.cache_root = PathBuf::from(root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse TOML text, resolving relative paths against `base`. No
    /// environment overrides are applied.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut paths = raw.paths;
        paths.resolve(base);
        let cfg = Self {
            paths,
            synthetic: raw.synthetic,
            axes: raw.matrix.unwrap_or_else(MatrixAxes::full).normalized()?,
            preprocess: raw.preprocess,
            training: raw.training,
            evaluation: raw.evaluation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for key in self.training.frozen_units.keys() {
            key.parse::<Architecture>().map_err(|_| CliError::Config(format!("training.frozen_units: unknown architecture {key:?}")))?;
        }
        for key in self.training.base_lr.keys() {
            key.parse::<OptimizerKind>().map_err(|_| CliError::Config(format!("training.base_lr: unknown optimiser {key:?}")))?;
        }
        if self.synthetic.is_some() && self.paths.manifest.file_name().is_none_or(|n| n != "manifest.csv") {
            return Err(CliError::Config("a [synthetic] dataset is written as manifest.csv; point paths.manifest at it".into()));
        }
        for r in &self.axes.resolutions {
            self.preprocess_config(*r).validate()?;
        }
        for cell in self.axes.cells() {
            self.train_config(&cell).validate()?;
        }
        Ok(())
    }

    pub fn preprocess_config(&self, resolution: Resolution) -> PreprocessConfig {
        PreprocessConfig {
            mean_rgb: self.preprocess.mean_rgb,
            target_resolution: resolution,
            apply_color_constancy: self.preprocess.apply_color_constancy,
            order: self.preprocess.order,
        }
    }

    pub fn preprocess_configs(&self) -> Vec<PreprocessConfig> {
        self.axes.resolutions.iter().map(|&r| self.preprocess_config(r)).collect()
    }

    /// Training recipe for one cell, before the input digest is known.
    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        let t = &self.training;
        let mut c = TrainConfig::for_cell(cell);
        c.epochs = t.epochs;
        c.lr_drop_epochs = t.lr_drop_epochs.clone();
        c.lr_drop_factor = t.lr_drop_factor;
        c.batch_size = t.batch_size.unwrap_or_else(|| default_batch_size(cell.resolution));
        c.augment = t.augment;
        c.backbone.pretrained = t.pretrained;
        c.model.head_init_std = t.head_init_std;
        c.model.frozen_units = t.frozen_units.get(cell.architecture.id()).copied();
        c.optimizer.weight_decay = t.weight_decay;
        if let Some(&lr) = t.base_lr.get(cell.optimizer.id()) {
            c.optimizer.base_lr = lr;
        }
        c
    }

    pub fn fusion_graph(&self) -> Result<FusionGraph> {
        Ok(FusionGraph::from_axes(&self.axes)?)
    }

    pub fn feature_cache_bytes(&self) -> usize {
        self.training.feature_cache_mb.saturating_mul(1 << 20)
    }

    pub fn fusion_graph_path(&self) -> PathBuf {
        self.paths.predictions.join("fusion_graph.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.paths.reports.join("eval")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[paths]
manifest = "data/manifest.csv"
cache_root = "cache"
weights = "/abs/weights"
runs = "runs"
predictions = "preds"
reports = "reports"
"#;

    #[test]
    fn defaults_and_relative_paths() {
        let c = PipelineConfig::from_toml(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(c.paths.manifest, Path::new("/base/data/manifest.csv"));
        assert_eq!(c.paths.weights, Path::new("/abs/weights"));
        assert_eq!(c.axes, MatrixAxes::full());
        assert_eq!(c.axes.cells().len(), 135);
        let cell = c.axes.cells()[0];
        assert_eq!(c.train_config(&cell), TrainConfig::for_cell(&cell));
    }

    #[test]
    fn sections_apply() {
        let text = format!(
            "{MINIMAL}\n[matrix]\narchitectures = [\"resnet18\"]\nresolutions = [128, 64]\noptimizers = [\"adam\"]\nrepeats = [2]\n\
             [training]\nepochs = 4\nlr_drop_epochs = [2]\naugment = \"random_element\"\nbatch_size = 8\n\
             [training.frozen_units]\nresnet18 = 7\n[training.base_lr]\nadam = 0.001\n"
        );
        let c = PipelineConfig::from_toml(&text, Path::new("/b")).unwrap();
        assert_eq!(c.axes.resolutions, vec![Resolution::R64, Resolution::R128]);
        let t = c.train_config(&c.axes.cells()[0]);
        assert_eq!((t.epochs, t.batch_size, t.augment), (4, 8, AugmentPolicy::RandomElement));
        assert_eq!(t.model.frozen_units, Some(7));
        assert_eq!(t.optimizer.base_lr, 0.001);
        assert_eq!(t.repeat_index, 2);
    }

    #[test]
    fn config_errors() {
        let bad = [
            format!("{MINIMAL}\n[training]\nepochz = 3\n"),
            format!("{MINIMAL}\n[matrix]\narchitectures = [\"vgg\"]\nresolutions = [64]\noptimizers = [\"adam\"]\nrepeats = [1]\n"),
            format!("{MINIMAL}\n[matrix]\narchitectures = [\"resnet18\"]\nresolutions = [100]\noptimizers = [\"adam\"]\nrepeats = [1]\n"),
            format!("{MINIMAL}\n[training]\nlr_drop_epochs = [20]\n"),
            format!("{MINIMAL}\n[training.frozen_units]\nvgg = 3\n"),
            "[paths]\nmanifest = \"m.csv\"\n".to_string(),
        ];
        for text in bad {
            assert!(matches!(PipelineConfig::from_toml(&text, Path::new(".")), Err(CliError::Config(_))), "{text}");
        }
    }
}
