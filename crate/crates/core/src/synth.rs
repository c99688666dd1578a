//! Deterministic synthetic lesion-like dataset of coloured shapes.
//!
//! Each class has its own shape, size, hue and texture so the task is
//! separable: MM are large irregular dark blobs with stripes, SK are
//! light squares with bright dots, BN are small smooth round spots.

use std::f64::consts::TAU;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{manifest_to_csv, DatasetManifest, ImageRecord, Label, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_if_changed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n_train: 150, n_test: 60, width: 112, height: 96, seed: 2017 }
    }
}

fn lesion_label(i: usize) -> Label {
    Label::ALL[i % 3]
}

/// Render one image; `u`, `v` are coordinates relative to the lesion centre
/// in units of the shorter side.
pub fn render(label: Label, width: u32, height: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let noise = Normal::new(0.0, 5.0).expect("valid std");
    let skin = [rng.random_range(185.0..215.0), rng.random_range(145.0..175.0), rng.random_range(125.0..150.0)];
    let tilt = [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)];
    let (cx, cy) = (rng.random_range(0.4..0.6) * width as f64, rng.random_range(0.4..0.6) * height as f64);
    let unit = width.min(height) as f64;
    let angle: f64 = rng.random_range(0.0..TAU);
    let phases: [f64; 3] = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
    let (size, colour): (f64, [f64; 3]) = match label {
        Label::Mm => (rng.random_range(0.30..0.38), [70.0, 45.0, 80.0]),
        Label::Sk => (rng.random_range(0.19..0.25), [160.0, 125.0, 60.0]),
        Label::Bn => (rng.random_range(0.11..0.16), [125.0, 75.0, 55.0]),
    };
    RgbImage::from_fn(width, height, |x, y| {
        let (dx, dy) = ((x as f64 - cx) / unit, (y as f64 - cy) / unit);
        let (u, v) = (dx * angle.cos() + dy * angle.sin(), -dx * angle.sin() + dy * angle.cos());
        let r = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let (inside, texture) = match label {
            Label::Mm => {
                let edge = size * (1.0 + 0.18 * (3.0 * theta + phases[0]).sin() + 0.1 * (5.0 * theta + phases[1]).sin());
                (r < edge, 35.0 * (u * 60.0 + phases[2]).sin().signum())
            }
            Label::Sk => {
                let dots = ((u * 45.0).sin() * (v * 45.0).sin()).max(0.0).powi(8);
                (u.abs().max(v.abs()) < size, 80.0 * dots)
            }
            Label::Bn => (r < size, 0.0),
        };
        let base = [skin[0] + tilt[0] * dx, skin[1] + tilt[1] * dy, skin[2]];
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = if inside { colour[c] + texture } else { base[c] } + noise.sample(rng);
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Write PNGs and `manifest.csv` under `dir`; files whose bytes would not
/// change are left untouched. Returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    if spec.n_train == 0 || spec.width < 16 || spec.height < 16 {
        return Err(Error::Config(format!("synthetic dataset needs training images and sides >= 16, got {spec:?}")));
    }
    let mut records = Vec::with_capacity(spec.n_train + spec.n_test);
    for i in 0..spec.n_train + spec.n_test {
        let label = lesion_label(i);
        let split = if i < spec.n_train { Split::Train } else { Split::Test };
        let image_id = format!("syn_{i:04}");
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
        let img = render(label, spec.width, spec.height, &mut rng);
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .map_err(|e| Error::Decode { path: dir.join(&image_id), message: e.to_string() })?;
        let file = PathBuf::from("images").join(format!("{image_id}.png"));
        write_if_changed(&dir.join(&file), &bytes)?;
        records.push(ImageRecord {
            image_id,
            file_path: file,
            label,
            split,
            width_px: Some(spec.width),
            height_px: Some(spec.height),
        });
    }
    let manifest = DatasetManifest::new(dir, records)?;
    let path = dir.join("manifest.csv");
    write_if_changed(&path, manifest_to_csv(&manifest).as_bytes())?;
    Ok(path)
}
