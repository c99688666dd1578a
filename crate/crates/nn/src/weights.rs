//! Weight files: backbone weight stores and model checkpoints.
//!
//! Both use the safetensors container with a `.sha256` sidecar.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use dermres_core::fsutil::{read_verified, sha256_hex, write_with_checksum};
use dermres_core::{Architecture, Scalar, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{probe_batch, AdaptedModel, ModelConfig, NamedTensors};

const META_KEY: &str = "dermres";

pub fn encode_safetensors(tensors: &NamedTensors, meta: Option<&str>) -> Result<Vec<u8>> {
    let bytes: BTreeMap<&String, Vec<u8>> = tensors
        .iter()
        .map(|(k, t)| {
            let mut b = Vec::with_capacity(t.len() * 4);
            f32::write_le(t.data(), &mut b);
            (k, b)
        })
        .collect();
    let views = tensors
        .iter()
        .map(|(k, t)| TensorView::new(Dtype::F32, t.shape().to_vec(), &bytes[k]).map(|v| (k.clone(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::WeightStore(e.to_string()))?;
    let info = meta.map(|m| HashMap::from([(META_KEY.to_string(), m.to_string())]));
    safetensors::serialize(views, info).map_err(|e| Error::WeightStore(e.to_string()))
}

/// Floating-point tensors and the metadata string; integer tensors such as
/// batch counters are skipped.
pub fn decode_safetensors(bytes: &[u8]) -> Result<(NamedTensors, Option<String>)> {
    let err = |e: safetensors::SafeTensorError| Error::WeightStore(e.to_string());
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(err)?;
    let meta = header.metadata().as_ref().and_then(|m| m.get(META_KEY).cloned());
    let st = SafeTensors::deserialize(bytes).map_err(err)?;
    let mut out = NamedTensors::new();
    for (name, view) in st.tensors() {
        let data: Vec<f32> = match view.dtype() {
            Dtype::F32 => f32::read_le(view.data()).expect("aligned f32 data"),
            Dtype::F64 => f64::read_le(view.data()).expect("aligned f64 data").into_iter().map(|v| v as f32).collect(),
            _ => continue,
        };
        out.insert(name, Tensor::from_vec(view.shape(), data)?);
    }
    Ok((out, meta))
}

/// Source of backbone weights for an architecture.
pub trait WeightStore: Send + Sync {
    fn load(&self, architecture: Architecture) -> Result<NamedTensors>;
    /// Stable description of what `load` returns, folded into run hashes.
    fn identity(&self, architecture: Architecture) -> Result<String>;
}

/// `<dir>/<architecture>.weights` with a checksum sidecar.
#[derive(Debug, Clone)]
pub struct DirWeightStore {
    pub dir: PathBuf,
}

impl DirWeightStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, architecture: Architecture) -> PathBuf {
        self.dir.join(format!("{}.weights", architecture.id()))
    }

    pub fn save(&self, architecture: Architecture, tensors: &NamedTensors) -> Result<String> {
        let bytes = encode_safetensors(tensors, None)?;
        Ok(write_with_checksum(&self.path(architecture), &bytes)?)
    }

    fn read(&self, architecture: Architecture) -> Result<(Vec<u8>, String)> {
        let path = self.path(architecture);
        if !path.exists() {
            return Err(Error::WeightStore(format!("no weights for {architecture} at {}", path.display())));
        }
        read_verified(&path).map_err(|e| Error::WeightStore(e.to_string()))
    }
}

impl WeightStore for DirWeightStore {
    fn load(&self, architecture: Architecture) -> Result<NamedTensors> {
        let (bytes, _) = self.read(architecture)?;
        Ok(decode_safetensors(&bytes)?.0)
    }

    fn identity(&self, architecture: Architecture) -> Result<String> {
        Ok(format!("file:{}", self.read(architecture)?.1))
    }
}

/// Offline stand-in for pretrained weights: a seeded He-normal backbone
/// whose batch-norm statistics are calibrated on a synthetic probe batch.
#[derive(Debug, Clone, Copy)]
pub struct RandomInitStore {
    pub seed: u64,
}

impl Default for RandomInitStore {
    fn default() -> Self {
        Self { seed: 0x5eed }
    }
}

impl RandomInitStore {
    const PROBE_SIDE: usize = 128;
    const PROBE_BATCH: usize = 4;

    fn arch_seed(&self, architecture: Architecture) -> u64 {
        let h = sha256_hex(architecture.id().as_bytes());
        self.seed ^ u64::from_str_radix(&h[..16], 16).expect("hex digest")
    }
}

impl WeightStore for RandomInitStore {
    fn load(&self, architecture: Architecture) -> Result<NamedTensors> {
        let mut m = AdaptedModel::<f32>::skeleton(architecture, Some(0))?;
        let seed = self.arch_seed(architecture);
        m.init_backbone_random(seed);
        m.calibrate(&probe_batch(Self::PROBE_BATCH, Self::PROBE_SIDE, seed));
        Ok(m.backbone_state())
    }

    fn identity(&self, architecture: Architecture) -> Result<String> {
        Ok(format!("random:{}", self.arch_seed(architecture)))
    }
}

/// Local directory first, then the random stand-in if no file exists.
#[derive(Debug, Clone)]
pub struct FallbackStore {
    pub primary: DirWeightStore,
    pub fallback: RandomInitStore,
}

impl FallbackStore {
    fn pick(&self, architecture: Architecture) -> &dyn WeightStore {
        if self.primary.path(architecture).exists() {
            &self.primary
        } else {
            &self.fallback
        }
    }
}

impl WeightStore for FallbackStore {
    fn load(&self, architecture: Architecture) -> Result<NamedTensors> {
        self.pick(architecture).load(architecture)
    }

    fn identity(&self, architecture: Architecture) -> Result<String> {
        self.pick(architecture).identity(architecture)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub architecture: Architecture,
    /// Load weights from the store; otherwise use a random backbone.
    pub pretrained: bool,
}

/// Backbone from `store` (or random), fresh head from `head_seed`.
pub fn build_model<T: Scalar>(
    spec: BackboneSpec,
    config: &ModelConfig,
    store: &dyn WeightStore,
    head_seed: u64,
) -> Result<AdaptedModel<T>> {
    let mut model = AdaptedModel::skeleton(spec.architecture, config.frozen_units)?;
    let weights = if spec.pretrained { store.load(spec.architecture)? } else { RandomInitStore::default().load(spec.architecture)? };
    model.load_backbone(&weights)?;
    model.init_head(config.head_init_std, head_seed)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub frozen_units: usize,
}

/// Write every model entry; returns the content digest.
pub fn save_checkpoint<T: Scalar>(model: &AdaptedModel<T>, path: &Path) -> Result<String> {
    let meta = CheckpointMeta { architecture: model.architecture, frozen_units: model.frozen_units() };
    let meta = serde_json::to_string(&meta).expect("meta serializes");
    let bytes = encode_safetensors(&model.state(), Some(&meta))?;
    Ok(write_with_checksum(path, &bytes)?)
}

/// Rebuild a model from a checkpoint after verifying its checksum.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<AdaptedModel<T>> {
    let (bytes, _) = read_verified(path).map_err(|e| match e {
        dermres_core::Error::Io { .. } => Error::Prerequisite { stage: "train", detail: e.to_string() },
        other => Error::WeightStore(other.to_string()),
    })?;
    let (tensors, meta) = decode_safetensors(&bytes)?;
    let meta: CheckpointMeta = meta
        .and_then(|m| serde_json::from_str(&m).ok())
        .ok_or_else(|| Error::WeightStore(format!("{} has no checkpoint metadata", path.display())))?;
    let mut model = AdaptedModel::skeleton(meta.architecture, Some(meta.frozen_units))?;
    model.load_state(&tensors)?;
    Ok(model)
}
