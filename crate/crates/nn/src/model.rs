//! Backbones with a replaced classification head and a frozen prefix.

use std::collections::BTreeMap;
use std::ops::Range;

use dermres_core::fsutil::sha256_hex;
use dermres_core::{Architecture, Resolution, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blocks::{BasicBlock, Bottleneck, DenseBlock, FinalNorm, Stem, Transition, Unit};
use crate::error::{Error, Result};
use crate::layers::{GlobalAvgPool, Linear, Mode, Relu};
use crate::store::{ParamStore, Partition};

pub const HEAD_HIDDEN: usize = 64;
pub const NUM_CLASSES: usize = 3;

/// Tensors keyed by parameter name, as stored on disk.
pub type NamedTensors = BTreeMap<String, Tensor<f32>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Leading backbone units kept frozen; `None` uses the architecture default.
    pub frozen_units: Option<usize>,
    /// Standard deviation of the Gaussian head initialisation.
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { frozen_units: None, head_init_std: 1.0 }
    }
}

/// Default frozen prefix, counted in backbone units (the stem is unit 0).
///
/// ResNet-18: stem and residual blocks 1-4. ResNet-50: stem and the first 14
/// of 16 bottleneck blocks. DenseNet-121: stem, dense blocks 1-3 and their
/// transitions.
pub fn default_frozen_units(architecture: Architecture) -> usize {
    match architecture {
        Architecture::ResNet18 => 5,
        Architecture::ResNet50 => 15,
        Architecture::DenseNet121 => 7,
    }
}

#[derive(Debug, Clone)]
pub struct Head<T> {
    gap: GlobalAvgPool,
    pub fc1: Linear<T>,
    relu: Relu,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Head<T> {
    fn new(ps: &mut ParamStore<T>, feature_dim: usize) -> Self {
        Self {
            gap: GlobalAvgPool::default(),
            fc1: Linear::new(ps, "head.fc1", feature_dim, HEAD_HIDDEN),
            relu: Relu::default(),
            fc2: Linear::new(ps, "head.fc2", HEAD_HIDDEN, NUM_CLASSES),
        }
    }

    fn forward(&mut self, ps: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let f = self.gap.forward(x, mode);
        let h = self.fc1.forward(ps, f, mode);
        let h = self.relu.forward(h, mode);
        self.fc2.forward(ps, h, mode)
    }

    fn backward(&mut self, ps: &mut ParamStore<T>, g: &Tensor<T>) -> Tensor<T> {
        let g = self.fc2.backward(ps, g, true).expect("head gradient");
        let g = self.relu.backward(g);
        let g = self.fc1.backward(ps, &g, true).expect("head gradient");
        self.gap.backward(&g)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub frozen: Vec<String>,
    pub backbone_trainable: Vec<String>,
    pub head: Vec<String>,
    pub frozen_count: usize,
    pub backbone_trainable_count: usize,
    pub head_count: usize,
    pub total_count: usize,
}

#[derive(Debug, Clone)]
pub struct AdaptedModel<T> {
    pub architecture: Architecture,
    pub params: ParamStore<T>,
    units: Vec<Unit<T>>,
    unit_names: Vec<String>,
    unit_ranges: Vec<Range<usize>>,
    frozen_units: usize,
    head: Head<T>,
    head_range: Range<usize>,
    pub feature_dim: usize,
}

struct Builder<T> {
    ps: ParamStore<T>,
    units: Vec<Unit<T>>,
    names: Vec<String>,
    ranges: Vec<Range<usize>>,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, make: impl FnOnce(&mut ParamStore<T>) -> Unit<T>) {
        let start = self.ps.len();
        let unit = make(&mut self.ps);
        self.ranges.push(start..self.ps.len());
        self.units.push(unit);
        self.names.push(name);
    }
}

fn resnet<T: Scalar>(b: &mut Builder<T>, bottleneck: bool, depths: [usize; 4]) -> usize {
    b.add("stem".into(), |ps| Unit::Stem(Stem::new(ps, "conv1", "bn1")));
    let mut cin = 64;
    for (stage, &n) in depths.iter().enumerate() {
        let width = 64 << stage;
        for i in 0..n {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let prefix = format!("layer{}.{i}", stage + 1);
            if bottleneck {
                b.add(prefix.clone(), |ps| Unit::Bottleneck(Bottleneck::new(ps, &prefix, cin, width, stride)));
                cin = width * Bottleneck::<T>::EXPANSION;
            } else {
                b.add(prefix.clone(), |ps| Unit::Basic(BasicBlock::new(ps, &prefix, cin, width, stride)));
                cin = width;
            }
        }
    }
    cin
}

fn densenet121<T: Scalar>(b: &mut Builder<T>) -> usize {
    const GROWTH: usize = 32;
    const BN_SIZE: usize = 4;
    b.add("stem".into(), |ps| Unit::Stem(Stem::new(ps, "features.conv0", "features.norm0")));
    let mut c = 64;
    for (i, n) in [6usize, 12, 24, 16].into_iter().enumerate() {
        let name = format!("features.denseblock{}", i + 1);
        b.add(name.clone(), |ps| Unit::Dense(DenseBlock::new(ps, &name, n, c, GROWTH, BN_SIZE)));
        c += n * GROWTH;
        if i < 3 {
            let name = format!("features.transition{}", i + 1);
            b.add(name.clone(), |ps| Unit::Transition(Transition::new(ps, &name, c, c / 2)));
            c /= 2;
        }
    }
    b.add("features.norm5".into(), |ps| Unit::FinalNorm(FinalNorm::new(ps, "features.norm5", c)));
    c
}

fn is_backbone_conv(name: &str, value_shape: &[usize]) -> bool {
    value_shape.len() == 4 && name.ends_with(".weight")
}

impl<T: Scalar> AdaptedModel<T> {
    /// Architecture with zero weights, a fresh head slot and partitions
    /// assigned. Weights come from [`AdaptedModel::load_backbone`] or
    /// [`AdaptedModel::init_backbone_random`].
    pub fn skeleton(architecture: Architecture, frozen_units: Option<usize>) -> Result<Self> {
        let mut b = Builder { ps: ParamStore::new(), units: Vec::new(), names: Vec::new(), ranges: Vec::new() };
        let feature_dim = match architecture {
            Architecture::ResNet18 => resnet(&mut b, false, [2, 2, 2, 2]),
            Architecture::ResNet50 => resnet(&mut b, true, [3, 4, 6, 3]),
            Architecture::DenseNet121 => densenet121(&mut b),
        };
        let frozen_units = frozen_units.unwrap_or_else(|| default_frozen_units(architecture));
        if frozen_units > b.units.len() {
            return Err(Error::config(format!(
                "{architecture} has {} freezable units, cannot freeze {frozen_units}",
                b.units.len()
            )));
        }
        let head_start = b.ps.len();
        let head = Head::new(&mut b.ps, feature_dim);
        let head_range = head_start..b.ps.len();
        let mut model = Self {
            architecture,
            params: b.ps,
            units: b.units,
            unit_names: b.names,
            unit_ranges: b.ranges,
            frozen_units,
            head,
            head_range,
            feature_dim,
        };
        model.assign_partitions();
        Ok(model)
    }

    fn assign_partitions(&mut self) {
        for (u, range) in self.unit_ranges.iter().enumerate() {
            let part = if u < self.frozen_units { Partition::Frozen } else { Partition::BackboneTrainable };
            for i in range.clone() {
                self.params.set_partition(crate::store::ParamId(i), part);
            }
        }
        for i in self.head_range.clone() {
            self.params.set_partition(crate::store::ParamId(i), Partition::Head);
        }
    }

    pub fn frozen_units(&self) -> usize {
        self.frozen_units
    }

    pub fn unit_names(&self) -> &[String] {
        &self.unit_names
    }

    /// Backbone initialisation without pretrained weights: He-normal
    /// convolutions, unit batch-norm scale.
    pub fn init_backbone_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_out = !matches!(self.architecture, Architecture::DenseNet121);
        let head = self.head_range.clone();
        for (i, e) in self.params.entries_mut().iter_mut().enumerate() {
            if head.contains(&i) {
                continue;
            }
            let shape = e.value.shape().to_vec();
            if is_backbone_conv(&e.name, &shape) {
                let fan = if fan_out { shape[0] } else { shape[1] } * shape[2] * shape[3];
                let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("valid std");
                e.value.data_mut().iter_mut().for_each(|v| *v = T::lit(normal.sample(&mut rng)));
            } else if e.name.ends_with(".weight") || e.name.ends_with(".running_var") {
                e.value.data_mut().fill(T::one());
            } else {
                e.value.data_mut().fill(T::zero());
            }
        }
    }

    /// Head weights from N(0, std^2), biases zero.
    pub fn init_head(&mut self, std: f64, seed: u64) -> Result<()> {
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::config(format!("head_init_std must be positive, got {std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        for i in self.head_range.clone() {
            let e = &mut self.params.entries_mut()[i];
            if e.name.ends_with(".weight") {
                e.value.data_mut().iter_mut().for_each(|v| *v = T::lit(normal.sample(&mut rng)));
            } else {
                e.value.data_mut().fill(T::zero());
            }
        }
        Ok(())
    }

    /// Re-estimate every batch-norm running statistic from one probe batch.
    pub fn calibrate(&mut self, probe: &Tensor<T>) {
        let mut x = probe.clone();
        for u in &mut self.units {
            x = u.forward(&mut self.params, x, Mode::Calibrate);
        }
    }

    /// Fill the backbone from named tensors (extra names such as the
    /// original classifier are ignored).
    pub fn load_backbone(&mut self, tensors: &NamedTensors) -> Result<()> {
        let mut missing = Vec::new();
        let head = self.head_range.clone();
        for (i, e) in self.params.entries_mut().iter_mut().enumerate() {
            if head.contains(&i) {
                continue;
            }
            match tensors.get(&e.name) {
                None => missing.push(e.name.clone()),
                Some(t) if t.shape() != e.value.shape() => {
                    return Err(Error::WeightStore(format!(
                        "{}: expected shape {:?}, found {:?}",
                        e.name,
                        e.value.shape(),
                        t.shape()
                    )))
                }
                Some(t) => e.value = t.cast(),
            }
        }
        if !missing.is_empty() {
            let shown: Vec<_> = missing.iter().take(5).collect();
            return Err(Error::WeightStore(format!(
                "{}: {} backbone tensors missing, e.g. {shown:?}",
                self.architecture,
                missing.len()
            )));
        }
        Ok(())
    }

    /// Every entry, parameters and buffers, by name.
    pub fn state(&self) -> NamedTensors {
        self.params.entries().iter().map(|e| (e.name.clone(), e.value.cast())).collect()
    }

    /// Backbone entries only.
    pub fn backbone_state(&self) -> NamedTensors {
        self.params.entries()[..self.head_range.start].iter().map(|e| (e.name.clone(), e.value.cast())).collect()
    }

    /// Restore every entry; names and shapes must match exactly.
    pub fn load_state(&mut self, tensors: &NamedTensors) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::WeightStore(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for e in self.params.entries_mut() {
            let t = tensors.get(&e.name).ok_or_else(|| Error::WeightStore(format!("checkpoint lacks {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::WeightStore(format!("{}: shape {:?} vs {:?}", e.name, t.shape(), e.value.shape())));
            }
            e.value = t.cast();
        }
        Ok(())
    }

    /// Digest of the frozen entries; equal digests mean equal frozen
    /// feature extractors.
    pub fn frozen_digest(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.architecture.id().as_bytes());
        for e in self.params.entries().iter().filter(|e| e.partition == Partition::Frozen) {
            bytes.extend_from_slice(e.name.as_bytes());
            f32::write_le(e.value.cast::<f32>().data(), &mut bytes);
        }
        sha256_hex(&bytes)
    }

    pub fn trainable_parameter_report(&self) -> PartitionReport {
        let mut r = PartitionReport {
            frozen: vec![],
            backbone_trainable: vec![],
            head: vec![],
            frozen_count: 0,
            backbone_trainable_count: 0,
            head_count: 0,
            total_count: self.params.parameter_count(),
        };
        for e in self.params.entries().iter().filter(|e| !e.is_buffer) {
            let (names, count) = match e.partition {
                Partition::Frozen => (&mut r.frozen, &mut r.frozen_count),
                Partition::BackboneTrainable => (&mut r.backbone_trainable, &mut r.backbone_trainable_count),
                Partition::Head => (&mut r.head, &mut r.head_count),
            };
            names.push(e.name.clone());
            *count += e.value.len();
        }
        r
    }

    /// Check a `(B, 3, R, R)` batch with a supported `R`.
    pub fn check_input(&self, x: &Tensor<T>) -> Result<Resolution> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::Core(dermres_core::ShapeError::new(format!("expected (B, 3, R, R), got {s:?}")).into()));
        }
        Resolution::new(s[2] as u32).map_err(Error::from)
    }

    /// Inference-mode logits `(B, 3)`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.frozen_features(x)?;
        Ok(self.forward_trainable(f, Mode::Eval))
    }

    /// Output of the frozen prefix in inference mode.
    pub fn frozen_features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for u in &mut self.units[..self.frozen_units] {
            y = u.forward(&mut self.params, y, Mode::Eval);
        }
        Ok(y)
    }

    /// Trainable units and head applied to frozen-prefix features.
    pub fn forward_trainable(&mut self, features: Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = features;
        for u in &mut self.units[self.frozen_units..] {
            y = u.forward(&mut self.params, y, mode);
        }
        self.head.forward(&self.params, &y, mode)
    }

    /// Accumulate gradients of the trainable partitions for `dlogits`.
    /// Nothing is propagated into the frozen prefix.
    pub fn backward(&mut self, dlogits: &Tensor<T>) {
        let mut g = self.head.backward(&mut self.params, dlogits);
        let first = self.frozen_units;
        for (i, u) in self.units.iter_mut().enumerate().skip(first).rev() {
            match u.backward(&mut self.params, g, i > first) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

/// Smooth random colour fields at roughly the scale of mean-subtracted
/// images, used to calibrate batch-norm statistics of untrained backbones.
pub fn probe_batch<T: Scalar>(n: usize, side: usize, seed: u64) -> Tensor<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 10.0).expect("valid std");
    let mut out = Tensor::zeros(&[n, 3, side, side]);
    for plane in out.data_mut().chunks_mut(side * side) {
        let offset: f64 = rng.random_range(-40.0..40.0);
        let amp: f64 = rng.random_range(10.0..60.0);
        let (fx, fy): (f64, f64) = (rng.random_range(0.5..4.0), rng.random_range(0.5..4.0));
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for (i, v) in plane.iter_mut().enumerate() {
            let (y, x) = ((i / side) as f64 / side as f64, (i % side) as f64 / side as f64);
            let s = offset + amp * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin() + noise.sample(&mut rng);
            *v = T::lit(s);
        }
    }
    out
}
