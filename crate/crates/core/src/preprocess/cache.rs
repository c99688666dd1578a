//! On-disk cache of preprocessed tensors.
//!
//! Layout: `<cache_root>/<resolution>/<image_id>.f32` holds the raw
//! little-endian `f32` array and `<image_id>.json` the sidecar. The sidecar
//! is written last, so its presence marks a complete entry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{preprocess_pipeline, PreprocessConfig};
use crate::catalog::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::plan::Resolution;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub image_id: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub written: usize,
    pub skipped: usize,
}

fn check_id(image_id: &str) -> Result<()> {
    if image_id.is_empty() || image_id.contains(['/', '\\']) || image_id.starts_with('.') {
        return Err(Error::Config(format!("image_id {image_id:?} is not usable as a cache file name")));
    }
    Ok(())
}

pub fn cache_entry_paths(cache_root: &Path, resolution: Resolution, image_id: &str) -> (PathBuf, PathBuf) {
    let dir = cache_root.join(resolution.to_string());
    (dir.join(format!("{image_id}.f32")), dir.join(format!("{image_id}.json")))
}

fn entry_valid(cache_root: &Path, config: &PreprocessConfig, image_id: &str) -> bool {
    let (data, meta) = cache_entry_paths(cache_root, config.target_resolution, image_id);
    let Ok(text) = fs::read_to_string(&meta) else { return false };
    let Ok(side) = serde_json::from_str::<CacheSidecar>(&text) else { return false };
    let r = config.target_resolution.side();
    let expected_len = (3 * r * r * 4) as u64;
    side.config_hash == config.content_hash()
        && side.shape == [3, r, r]
        && side.dtype == "f32"
        && fs::metadata(&data).map(|m| m.len() == expected_len).unwrap_or(false)
}

fn write_entry(cache_root: &Path, config: &PreprocessConfig, image_id: &str, tensor: &Tensor<f32>) -> Result<()> {
    let (data, meta) = cache_entry_paths(cache_root, config.target_resolution, image_id);
    let mut bytes = Vec::new();
    f32::write_le(tensor.data(), &mut bytes);
    atomic_write(&data, &bytes)?;
    let side = CacheSidecar {
        image_id: image_id.to_string(),
        shape: tensor.shape().to_vec(),
        dtype: "f32".into(),
        config_hash: config.content_hash(),
    };
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Serde(e.to_string()))?;
    atomic_write(&meta, json.as_bytes())
}

/// Preprocess every record for every config, skipping valid entries.
pub fn materialize_cache(
    manifest: &DatasetManifest,
    configs: &[PreprocessConfig],
    cache_root: &Path,
) -> Result<CacheSummary> {
    let mut summary = CacheSummary::default();
    for config in configs {
        config.validate()?;
        for record in &manifest.records {
            check_id(&record.image_id)?;
            if entry_valid(cache_root, config, &record.image_id) {
                summary.skipped += 1;
                continue;
            }
            let t = preprocess_pipeline::<f32>(manifest, record, config)?;
            write_entry(cache_root, config, &record.image_id, &t.data)?;
            summary.written += 1;
        }
    }
    Ok(summary)
}

/// Image ids among `records` without a valid cache entry for `config`.
pub fn missing_cache_entries<'a>(
    records: impl IntoIterator<Item = &'a ImageRecord>,
    config: &PreprocessConfig,
    cache_root: &Path,
) -> Vec<String> {
    records
        .into_iter()
        .filter(|r| !entry_valid(cache_root, config, &r.image_id))
        .map(|r| r.image_id.clone())
        .collect()
}

/// Load one cached `(3, R, R)` tensor, converted to `T`.
pub fn load_cached<T: Scalar>(cache_root: &Path, config: &PreprocessConfig, image_id: &str) -> Result<Tensor<T>> {
    if !entry_valid(cache_root, config, image_id) {
        return Err(Error::Coverage {
            message: format!("no valid cache entry at resolution {}", config.target_resolution),
            missing: vec![image_id.to_string()],
        });
    }
    let (data, _) = cache_entry_paths(cache_root, config.target_resolution, image_id);
    let bytes = fs::read(&data).map_err(|e| Error::io(&data, e))?;
    let values = f32::read_le(&bytes).ok_or_else(|| Error::Decode { path: data.clone(), message: "truncated".into() })?;
    let r = config.target_resolution.side();
    let t = Tensor::from_vec(&[3, r, r], values)?;
    Ok(t.cast())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_manifest;
    use image::{Rgb, RgbImage};

    fn toy_manifest(dir: &Path, n: usize) -> DatasetManifest {
        let mut csv = String::from("image_id,file_path,label,split\n");
        for i in 0..n {
            let img = RgbImage::from_fn(20, 12, |x, y| Rgb([(x * 9) as u8 + 10, (y * 17) as u8 + 5, 90 + i as u8]));
            img.save(dir.join(format!("im{i}.png"))).unwrap();
            csv.push_str(&format!("im{i},im{i}.png,{},train\n", ["MM", "SK", "BN"][i % 3]));
        }
        std::fs::write(dir.join("m.csv"), csv).unwrap();
        load_manifest(dir.join("m.csv")).unwrap()
    }

    #[test]
    fn counts_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), 3);
        let root = dir.path().join("cache");
        let one = [PreprocessConfig::new(Resolution::R64)];
        let s = materialize_cache(&m, &one, &root).unwrap();
        assert_eq!(s, CacheSummary { written: 3, skipped: 0 });
        let files = std::fs::read_dir(root.join("64")).unwrap().filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "f32").unwrap_or(false)
        });
        assert_eq!(files.count(), 3);

        let s = materialize_cache(&m, &one, &root).unwrap();
        assert_eq!(s, CacheSummary { written: 0, skipped: 3 });
    }

    #[test]
    fn five_resolutions_fifteen_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), 3);
        let root = dir.path().join("cache");
        let all: Vec<_> = Resolution::all().iter().map(|&r| PreprocessConfig::new(r)).collect();
        let s = materialize_cache(&m, &all, &root).unwrap();
        assert_eq!(s.written, 15);
        let mut count = 0;
        for r in Resolution::all() {
            for e in std::fs::read_dir(root.join(r.to_string())).unwrap() {
                if e.unwrap().path().extension().unwrap() == "f32" {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 15);
    }

    #[test]
    fn deterministic_bytes_and_config_change_invalidates() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), 2);
        let cfg = PreprocessConfig::new(Resolution::R64);
        let (r1, r2) = (dir.path().join("c1"), dir.path().join("c2"));
        materialize_cache(&m, &[cfg], &r1).unwrap();
        materialize_cache(&m, &[cfg], &r2).unwrap();
        for id in ["im0", "im1"] {
            let a = std::fs::read(cache_entry_paths(&r1, cfg.target_resolution, id).0).unwrap();
            let b = std::fs::read(cache_entry_paths(&r2, cfg.target_resolution, id).0).unwrap();
            assert_eq!(a, b);
        }
        let loaded: Tensor<f32> = load_cached(&r1, &cfg, "im0").unwrap();
        assert_eq!(loaded.shape(), &[3, 64, 64]);

        let changed = PreprocessConfig { apply_color_constancy: false, ..cfg };
        assert_eq!(missing_cache_entries(&m.records, &changed, &r1).len(), 2);
        assert_eq!(materialize_cache(&m, &[changed], &r1).unwrap().written, 2);
    }

    #[test]
    fn missing_entry_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PreprocessConfig::new(Resolution::R128);
        match load_cached::<f32>(dir.path(), &cfg, "ghost") {
            Err(Error::Coverage { missing, .. }) => assert_eq!(missing, vec!["ghost".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
