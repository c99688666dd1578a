//! Fine-tuning of one run: frozen-prefix features, dihedral augmentation,
//! stepped learning rates and per-partition rates.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use dermres_core::fsutil::sha256_hex;
use dermres_core::preprocess::{load_cached, missing_cache_entries};
use dermres_core::{Cell, DatasetManifest, DihedralElement, PreprocessConfig, Resolution, Scalar, Split, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{AdaptedModel, ModelConfig};
use crate::optim::{softmax_cross_entropy, Optimizer, OptimizerSpec};
use crate::weights::{build_model, save_checkpoint, BackboneSpec, WeightStore};

/// How training samples are drawn from the dihedral orbit each epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// Every image in all eight orientations (eight-fold epoch).
    #[default]
    FullOrbit,
    /// One uniformly drawn orientation per image and epoch.
    RandomElement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub resolution: Resolution,
    pub backbone: BackboneSpec,
    pub optimizer: OptimizerSpec,
    pub repeat_index: u32,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// Digest of the training data the run depends on; empty when unknown.
    #[serde(default)]
    pub input_digest: String,
}

/// 32 up to 224 px, 16 above.
pub fn default_batch_size(resolution: Resolution) -> usize {
    if resolution.px() <= 224 {
        32
    } else {
        16
    }
}

/// Seed recorded for a cell, distinct across repeats.
pub fn cell_seed(cell: &Cell) -> u64 {
    let h = sha256_hex(cell.run_id().as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

impl TrainConfig {
    /// Standard recipe for one matrix cell.
    pub fn for_cell(cell: &Cell) -> Self {
        Self {
            epochs: 15,
            lr_drop_epochs: vec![5, 10],
            lr_drop_factor: 10.0,
            batch_size: default_batch_size(cell.resolution),
            resolution: cell.resolution,
            backbone: BackboneSpec { architecture: cell.architecture, pretrained: true },
            optimizer: OptimizerSpec::standard(cell.optimizer),
            repeat_index: cell.repeat,
            model: ModelConfig::default(),
            augment: AugmentPolicy::default(),
            seed: cell_seed(cell),
            input_digest: String::new(),
        }
    }

    pub fn cell(&self) -> Cell {
        Cell {
            architecture: self.backbone.architecture,
            resolution: self.resolution,
            optimizer: self.optimizer.kind,
            repeat: self.repeat_index,
        }
    }

    pub fn run_id(&self) -> String {
        self.cell().run_id()
    }

    /// `epochs = 0` is accepted and means "checkpoint the fresh model".
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::config(format!("lr_drop_factor {} must be >= 1", self.lr_drop_factor)));
        }
        if let Some(&d) = self.lr_drop_epochs.iter().find(|&&d| d == 0 || (self.epochs > 0 && d > self.epochs)) {
            return Err(Error::config(format!("drop epoch {d} outside [1, {}]", self.epochs)));
        }
        if self.repeat_index == 0 {
            return Err(Error::config("repeat_index is 1-based"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// `(backbone_lr, head_lr)` for a 1-based epoch. A drop listed at epoch `d`
/// takes effect from epoch `d + 1`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<(f64, f64)> {
    if epoch == 0 || epoch > config.epochs {
        return Err(Error::contract(format!("epoch {epoch} outside [1, {}]", config.epochs)));
    }
    let drops = config.lr_drop_epochs.iter().filter(|&&d| d < epoch).count() as i32;
    let lr = config.optimizer.base_lr / config.lr_drop_factor.powi(drops);
    Ok((lr, lr * config.optimizer.head_lr_multiplier))
}

/// Preprocessed training images with class indices.
#[derive(Debug, Clone)]
pub struct TrainingSet<T> {
    pub resolution: Resolution,
    pub image_ids: Vec<String>,
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> TrainingSet<T> {
    /// Load the training split from the tensor cache. Missing entries are
    /// all reported before anything is loaded.
    pub fn from_cache(manifest: &DatasetManifest, preprocess: &PreprocessConfig, cache_root: &Path) -> Result<Self> {
        let records = manifest.require_split(Split::Train)?;
        let missing = missing_cache_entries(records.iter().copied(), preprocess, cache_root);
        if !missing.is_empty() {
            return Err(Error::Prerequisite {
                stage: "preprocess",
                detail: format!(
                    "{} of {} training images lack a cache entry at {} px under {}, e.g. {:?}",
                    missing.len(),
                    records.len(),
                    preprocess.target_resolution,
                    cache_root.display(),
                    &missing[..missing.len().min(3)]
                ),
            });
        }
        let mut set = Self { resolution: preprocess.target_resolution, image_ids: vec![], images: vec![], labels: vec![] };
        for r in records {
            set.images.push(load_cached(cache_root, preprocess, &r.image_id)?);
            set.image_ids.push(r.image_id.clone());
            set.labels.push(r.label.index());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Identifies the image content; part of the feature-cache key.
    pub fn digest(&self) -> String {
        let mut bytes = self.resolution.px().to_le_bytes().to_vec();
        for (id, x) in self.image_ids.iter().zip(&self.images) {
            bytes.extend_from_slice(id.as_bytes());
            f64::write_le(&x.cast::<f64>().into_vec(), &mut bytes);
        }
        sha256_hex(&bytes)
    }
}

/// Frozen-prefix outputs per (sample, orientation), shared by every run
/// with the same frozen weights and training set. Stops storing once the
/// byte budget is reached.
#[derive(Debug)]
pub struct FeatureCache<T> {
    budget_bytes: usize,
    used_bytes: usize,
    key: Option<(String, String)>,
    entries: HashMap<(usize, usize), Tensor<T>>,
    pub hits: usize,
    pub misses: usize,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn new(budget_bytes: usize) -> Self {
        Self { budget_bytes, used_bytes: 0, key: None, entries: HashMap::new(), hits: 0, misses: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn rekey(&mut self, frozen_digest: String, set_digest: String) {
        let key = Some((frozen_digest, set_digest));
        if self.key != key {
            self.entries.clear();
            self.used_bytes = 0;
            self.key = key;
        }
    }

    /// Stacked features for `(sample, orientation)` pairs.
    fn batch(
        &mut self,
        model: &mut AdaptedModel<T>,
        set: &TrainingSet<T>,
        pairs: &[(usize, DihedralElement)],
    ) -> Result<Tensor<T>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; pairs.len()];
        let mut todo = Vec::new();
        for (slot, &(i, g)) in out.iter_mut().zip(pairs) {
            match self.entries.get(&(i, g.index())) {
                Some(f) => {
                    self.hits += 1;
                    *slot = Some(f.clone());
                }
                None => todo.push((i, g)),
            }
        }
        if !todo.is_empty() {
            self.misses += todo.len();
            let inputs = todo.iter().map(|&(i, g)| g.apply(&set.images[i])).collect::<Result<Vec<_>, _>>()?;
            let feats = model.frozen_features(&Tensor::stack(&inputs)?)?;
            let per_item = feats.len() / todo.len();
            for (k, &(i, g)) in todo.iter().enumerate() {
                let f = feats.batch_item(k);
                if self.used_bytes + per_item * std::mem::size_of::<T>() <= self.budget_bytes {
                    self.used_bytes += per_item * std::mem::size_of::<T>();
                    self.entries.insert((i, g.index()), f.clone());
                }
                let pos = pairs.iter().zip(&out).position(|(&(j, h), o)| o.is_none() && j == i && h == g).expect("pending pair");
                out[pos] = Some(f);
            }
        }
        let items: Vec<Tensor<T>> = out.into_iter().map(|o| o.expect("filled")).collect();
        Ok(Tensor::stack(&items)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub checkpoint_path: PathBuf,
    pub checkpoint_sha256: String,
    pub epoch_losses: Vec<f64>,
    pub completed: bool,
}

/// Batch boundaries; a trailing single sample joins the previous batch so
/// that batch-norm statistics are never taken over one sample.
fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn epoch_pairs(policy: AugmentPolicy, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, DihedralElement)> {
    let all = DihedralElement::all();
    let mut pairs: Vec<_> = match policy {
        AugmentPolicy::FullOrbit => (0..n).flat_map(|i| all.into_iter().map(move |g| (i, g))).collect(),
        AugmentPolicy::RandomElement => (0..n).map(|i| (i, all[rng.random_range(0..8)])).collect(),
    };
    pairs.shuffle(rng);
    pairs
}

/// Flushes subnormal floats to zero on the current thread while alive.
/// Near-converged runs otherwise spend most of their time on subnormal
/// gradients and optimiser state.
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[allow(deprecated)]
    fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | 0x8040) };
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

/// Train one run and write its checkpoint to `checkpoint_path`.
pub fn train_run<T: Scalar>(
    config: &TrainConfig,
    set: &TrainingSet<T>,
    store: &dyn WeightStore,
    cache: &mut FeatureCache<T>,
    checkpoint_path: &Path,
) -> Result<RunResult> {
    config.validate()?;
    if set.resolution != config.resolution {
        return Err(Error::contract(format!(
            "training set is at {} px, run {} expects {}",
            set.resolution,
            config.run_id(),
            config.resolution
        )));
    }
    let mut model: AdaptedModel<T> = build_model(config.backbone, &config.model, store, config.seed)?;
    let _ftz = FlushDenormals::new();
    let mut losses = Vec::with_capacity(config.epochs);
    if config.epochs > 0 && set.is_empty() {
        return Err(Error::Core(dermres_core::Error::DegenerateInput("empty training set".into())));
    }
    cache.rekey(model.frozen_digest(), set.digest());
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 1..=config.epochs {
        let (lr, _) = lr_at_epoch(config, epoch)?;
        let pairs = epoch_pairs(config.augment, set.len(), &mut rng);
        let mut total = 0.0;
        for range in batch_ranges(pairs.len(), config.batch_size) {
            let chunk = &pairs[range];
            let feats = cache.batch(&mut model, set, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&(i, _)| set.labels[i]).collect();
            model.params.zero_grad();
            let logits = model.forward_trainable(feats, Mode::Train);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { run_id: config.run_id(), epoch });
            }
            model.backward(&dlogits);
            optimizer.step(&mut model.params, lr);
            total += loss * chunk.len() as f64;
        }
        losses.push(total / pairs.len() as f64);
    }
    let sha = save_checkpoint(&model, checkpoint_path)?;
    Ok(RunResult {
        run_id: config.run_id(),
        checkpoint_path: checkpoint_path.to_path_buf(),
        checkpoint_sha256: sha,
        epoch_losses: losses,
        completed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dermres_core::{Architecture, OptimizerKind};

    fn cfg(kind: OptimizerKind) -> TrainConfig {
        TrainConfig::for_cell(&Cell {
            architecture: Architecture::ResNet18,
            resolution: Resolution::R64,
            optimizer: kind,
            repeat: 1,
        })
    }

    #[test]
    fn schedule_table() {
        let c = cfg(OptimizerKind::Sgdm);
        assert_eq!(lr_at_epoch(&c, 1).unwrap(), (0.001, 0.01));
        let (b, h) = lr_at_epoch(&c, 7).unwrap();
        assert!((b - 1e-4).abs() < 1e-18 && (h - 1e-3).abs() < 1e-17);
        let a = cfg(OptimizerKind::Adam);
        let (b, h) = lr_at_epoch(&a, 15).unwrap();
        assert!((b - 1e-6).abs() < 1e-20 && (h - 1e-5).abs() < 1e-19);
        assert!(lr_at_epoch(&c, 0).is_err());
        assert!(lr_at_epoch(&c, 16).is_err());
    }

    #[test]
    fn batch_boundaries() {
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(1, 4), vec![0..1]);
        assert!(batch_ranges(0, 4).is_empty());
    }

    #[test]
    fn full_orbit_covers_every_pair_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p: Vec<_> = epoch_pairs(AugmentPolicy::FullOrbit, 5, &mut rng).into_iter().map(|(i, g)| (i, g.index())).collect();
        p.sort();
        let want: Vec<_> = (0..5).flat_map(|i| (0..8).map(move |g| (i, g))).collect();
        assert_eq!(p, want);
        assert_eq!(epoch_pairs(AugmentPolicy::RandomElement, 5, &mut rng).len(), 5);
    }

    #[test]
    fn validation() {
        let mut c = cfg(OptimizerKind::Sgdm);
        assert!(c.validate().is_ok());
        c.lr_drop_epochs = vec![16];
        assert!(c.validate().is_err());
        c.lr_drop_epochs = vec![5];
        c.epochs = 0;
        assert!(c.validate().is_ok());
        c.optimizer.base_lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_differ_by_repeat() {
        let mut a = cfg(OptimizerKind::Sgdm);
        let s1 = a.seed;
        a.repeat_index = 2;
        assert_ne!(cell_seed(&a.cell()), s1);
    }

    proptest::proptest! {
        #[test]
        fn schedule_is_stepwise_with_fixed_head_ratio(kind in 0usize..3, lr in 1e-6f64..1e-1) {
            let mut c = cfg(OptimizerKind::ALL[kind]);
            c.optimizer.base_lr = lr;
            let rates: Vec<(f64, f64)> = (1..=15).map(|e| lr_at_epoch(&c, e).unwrap()).collect();
            let mut drops = 0;
            for w in rates.windows(2) {
                proptest::prop_assert!(w[1].0 <= w[0].0);
                if w[1].0 < w[0].0 {
                    drops += 1;
                    proptest::prop_assert!((w[0].0 / w[1].0 - 10.0).abs() < 1e-9);
                }
            }
            proptest::prop_assert_eq!(drops, 2);
            for (e, (b, h)) in rates.iter().enumerate() {
                proptest::prop_assert!((h / b - 10.0).abs() < 1e-12);
                let plateau = e / 5;
                proptest::prop_assert!((b - lr / 10f64.powi(plateau as i32)).abs() <= 1e-15 * lr);
            }
        }
    }
}
