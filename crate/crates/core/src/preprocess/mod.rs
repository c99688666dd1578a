//! Colour constancy, mean subtraction and resizing.
//!
//! Images are planar `(3, H, W)` tensors on the 0-255 intensity scale and
//! stay in floating point through every stage; nothing is clamped.

mod cache;
mod resize;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result, ShapeError};
use crate::plan::Resolution;
use crate::scalar::{CompensatedSum, Scalar};
use crate::tensor::Tensor;

pub use cache::{cache_entry_paths, load_cached, materialize_cache, missing_cache_entries, CacheSidecar, CacheSummary};
pub use resize::{cubic_kernel, linear_kernel, resize_bicubic, resize_bicubic_to, resize_bilinear};

/// ImageNet channel means on the 0-255 scale.
pub const IMAGENET_MEAN_RGB: [f64; 3] = [123.68, 116.779, 103.939];

/// Position of mean subtraction relative to the resize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    /// colour constancy -> mean subtraction -> resize
    #[default]
    SubtractThenResize,
    /// colour constancy -> resize -> mean subtraction
    ResizeThenSubtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub mean_rgb: [f64; 3],
    pub target_resolution: Resolution,
    #[serde(default = "default_true")]
    pub apply_color_constancy: bool,
    #[serde(default)]
    pub order: StageOrder,
}

fn default_true() -> bool {
    true
}

impl PreprocessConfig {
    pub fn new(target_resolution: Resolution) -> Self {
        Self {
            mean_rgb: IMAGENET_MEAN_RGB,
            target_resolution,
            apply_color_constancy: true,
            order: StageOrder::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.mean_rgb.iter().enumerate() {
            if !m.is_finite() || !(0.0..=255.0).contains(m) {
                return Err(Error::Config(format!("mean_rgb[{i}] = {m} outside [0, 255]")));
            }
        }
        Resolution::new(self.target_resolution.px())?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; keys cache entries.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::json!({
            "kind": "dermres-preprocess-v1",
            "mean_rgb": self.mean_rgb,
            "target_resolution": self.target_resolution.px(),
            "apply_color_constancy": self.apply_color_constancy,
            "order": self.order,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedTensor<T> {
    pub origin_id: String,
    /// `(3, R, R)`
    pub data: Tensor<T>,
}

fn check_rgb<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(ShapeError::new(format!("expected (3, H, W), got {:?}", image.shape())).into());
    }
    let (_, h, w) = image.dims3();
    Ok((h, w))
}

pub fn channel_means<T: Scalar>(image: &Tensor<T>) -> Result<[T; 3]> {
    let (h, w) = check_rgb(image)?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::DegenerateInput("empty image".into()));
    }
    let mut out = [T::zero(); 3];
    for (c, m) in out.iter_mut().enumerate() {
        let mut s = CompensatedSum::new();
        for &v in &image.data()[c * plane..(c + 1) * plane] {
            s.add(v);
        }
        *m = s.total() / T::from_usize_lossy(plane);
    }
    Ok(out)
}

/// Gray-world colour constancy: channel `c` is scaled by `mean_all / mean_c`
/// where `mean_all` is the mean of the three channel means.
pub fn grayworld<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = check_rgb(image)?;
    let means = channel_means(image)?;
    if let Some(c) = means.iter().position(|m| !(*m > T::zero()) || !m.is_finite()) {
        return Err(Error::DegenerateInput(format!(
            "channel {c} mean is {}; gray-world gain undefined",
            means[c]
        )));
    }
    let mean_all = (means[0] + means[1] + means[2]) / T::lit(3.0);
    let plane = h * w;
    let mut out = image.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let gain = mean_all / means[c];
        for v in chunk {
            *v *= gain;
        }
    }
    Ok(out)
}

/// Subtract a per-channel mean. Results may be negative.
pub fn subtract_mean<T: Scalar>(image: &Tensor<T>, mean_rgb: [f64; 3]) -> Result<Tensor<T>> {
    let (h, w) = check_rgb(image)?;
    let plane = h * w;
    let mut out = image.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let m = T::lit(mean_rgb[c]);
        for v in chunk {
            *v -= m;
        }
    }
    Ok(out)
}

/// Run the configured chain on an already decoded image.
pub fn preprocess_image<T: Scalar>(image: &Tensor<T>, config: &PreprocessConfig) -> Result<Tensor<T>> {
    config.validate()?;
    let balanced = if config.apply_color_constancy { grayworld(image)? } else { image.clone() };
    let side = config.target_resolution.side();
    let out = match config.order {
        StageOrder::SubtractThenResize => resize_bicubic(&subtract_mean(&balanced, config.mean_rgb)?, side)?,
        StageOrder::ResizeThenSubtract => subtract_mean(&resize_bicubic(&balanced, side)?, config.mean_rgb)?,
    };
    if !out.all_finite() {
        return Err(Error::DegenerateInput("non-finite values after preprocessing".into()));
    }
    Ok(out)
}

/// Decode an 8-bit RGB file into a planar `(3, H, W)` tensor on the 0-255 scale.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let decode_err = |message: String| Error::Decode { path: path.to_path_buf(), message };
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let channels = img.color().channel_count();
    if channels != 3 {
        return Err(decode_err(format!("expected 3 channels, found {channels}")));
    }
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::lit(px.0[c] as f64);
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

/// Decode and preprocess one manifest record.
pub fn preprocess_pipeline<T: Scalar>(
    manifest: &DatasetManifest,
    record: &ImageRecord,
    config: &PreprocessConfig,
) -> Result<PreprocessedTensor<T>> {
    let run = || -> Result<Tensor<T>> {
        let img = load_rgb::<T>(&manifest.resolve(record))?;
        preprocess_image(&img, config)
    };
    let data = run().map_err(|e| e.with_image(&record.image_id))?;
    Ok(PreprocessedTensor { origin_id: record.image_id.clone(), data })
}
