//! Separable bicubic resampling.
//!
//! Catmull-Rom style cubic (a = -0.5), pixel-centre aligned, kernel support
//! fixed at two source pixels in every direction (no anti-alias widening when
//! shrinking). Taps falling outside the image are dropped and the remaining
//! weights renormalised, the same border rule Pillow uses.

use crate::error::ShapeError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const A: f64 = -0.5;
const SUPPORT: f64 = 2.0;

/// Keys cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Linear "tent" kernel, kept for comparisons against bicubic output.
pub fn linear_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

struct Taps<T> {
    start: usize,
    weights: Vec<T>,
}

fn taps<T: Scalar>(in_size: usize, out_size: usize, kernel: fn(f64) -> f64, support: f64) -> Vec<Taps<T>> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(in_size);
            let raw: Vec<f64> = (lo..hi).map(|i| kernel(i as f64 + 0.5 - center)).collect();
            let total: f64 = raw.iter().sum();
            let weights = raw
                .iter()
                .map(|w| T::lit(if total != 0.0 { w / total } else { *w }))
                .collect();
            Taps { start: lo, weights }
        })
        .collect()
}

fn resample<T: Scalar>(
    image: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    kernel: fn(f64) -> f64,
    support: f64,
) -> Result<Tensor<T>, ShapeError> {
    if image.ndim() != 3 {
        return Err(ShapeError::new(format!("expected (C, H, W), got {:?}", image.shape())));
    }
    let (c, h, w) = image.dims3();
    if out_h == 0 || out_w == 0 {
        return Err(ShapeError::new("target size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();

    // Horizontal pass: (c, h, w) -> (c, h, out_w)
    let hx = taps::<T>(w, out_w, kernel, support);
    let mut mid = vec![T::zero(); c * h * out_w];
    for plane in 0..c * h {
        let row = &src[plane * w..(plane + 1) * w];
        let out = &mut mid[plane * out_w..(plane + 1) * out_w];
        for (o, t) in out.iter_mut().zip(&hx) {
            let mut acc = T::zero();
            for (k, &wt) in t.weights.iter().enumerate() {
                acc += wt * row[t.start + k];
            }
            *o = acc;
        }
    }

    // Vertical pass: (c, h, out_w) -> (c, out_h, out_w)
    let vy = taps::<T>(h, out_h, kernel, support);
    let mut dst = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let plane = &mid[ch * h * out_w..(ch + 1) * h * out_w];
        for (oy, t) in vy.iter().enumerate() {
            let out = &mut dst[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for (k, &wt) in t.weights.iter().enumerate() {
                let src_row = &plane[(t.start + k) * out_w..(t.start + k + 1) * out_w];
                for (o, &s) in out.iter_mut().zip(src_row) {
                    *o += wt * s;
                }
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], dst)
}

/// Bicubic resize of a planar `(C, H, W)` image to `(C, out_h, out_w)`.
/// The aspect ratio is not preserved.
pub fn resize_bicubic_to<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>, ShapeError> {
    if image.ndim() == 3 {
        let (_, h, w) = image.dims3();
        if h < 4 || w < 4 {
            return Err(ShapeError::new(format!("bicubic input must be at least 4x4, got {w}x{h}")));
        }
    }
    resample(image, out_h, out_w, cubic_kernel, SUPPORT)
}

/// Bicubic resize to a square `target x target` image.
pub fn resize_bicubic<T: Scalar>(image: &Tensor<T>, target: usize) -> Result<Tensor<T>, ShapeError> {
    resize_bicubic_to(image, target, target)
}

/// Bilinear resize with the same geometry, for comparison only.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>, ShapeError> {
    resample(image, out_h, out_w, linear_kernel, 1.0)
}
