//! Layers with hand-written backward passes over NCHW tensors.
//!
//! A layer reads its weights from a [`ParamStore`] and keeps whatever its
//! backward pass needs from the last `Mode::Train` forward call.

use dermres_core::{Scalar, Tensor};

use crate::store::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running statistics, no caching.
    Eval,
    /// Batch statistics, running statistics updated, inputs cached.
    Train,
    /// Batch statistics copied into the running statistics, no caching.
    Calibrate,
}

/// Rows of column-matrix budget per im2col chunk (elements).
const COLS_BUDGET: usize = 1 << 23;

fn out_size(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, cols: &mut [T], ld: usize, off: usize) {
    let (oh, ow) = (out_size(h, k, s, p), out_size(w, k, s, p));
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], ld: usize, off: usize, c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, dx: &mut [T]) {
    let (oh, ow) = (out_size(h, k, s, p), out_size(w, k, s, p));
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ld + off..row * ld + off + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        let weight = ps.param(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        let bias = bias.then(|| ps.param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, cin, cout, k, stride, pad, cache: None }
    }

    fn chunk(&self, p: usize) -> usize {
        (COLS_BUDGET / (self.cin * self.k * self.k * p).max(1)).max(1)
    }

    pub fn forward(&mut self, ps: &ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c, h, w) = x.dims4();
        assert_eq!(c, self.cin, "conv input channels");
        let (oh, ow) = (out_size(h, self.k, self.stride, self.pad), out_size(w, self.k, self.stride, self.pad));
        let (kk, p) = (c * self.k * self.k, oh * ow);
        let wmat = ps.value(self.weight).data();
        let mut out = Tensor::zeros(&[b, self.cout, oh, ow]);
        let pointwise = self.k == 1 && self.stride == 1 && self.pad == 0;
        let chunk = if pointwise && p >= 256 { 1 } else { self.chunk(p) };
        let mut cols = Vec::new();
        let mut res = Vec::new();
        let xs = x.data();
        for b0 in (0..b).step_by(chunk) {
            let nb = chunk.min(b - b0);
            let ld = nb * p;
            if chunk == 1 {
                // (cout, kk) x (kk, p) straight into the output
                let src: &[T] = if pointwise {
                    &xs[b0 * c * h * w..(b0 + 1) * c * h * w]
                } else {
                    cols.resize(kk * ld, T::zero());
                    im2col(&xs[b0 * c * h * w..], c, h, w, self.k, self.stride, self.pad, &mut cols, ld, 0);
                    &cols
                };
                let dst = &mut out.data_mut()[b0 * self.cout * p..(b0 + 1) * self.cout * p];
                T::gemm(self.cout, kk, p, T::one(), wmat, kk as isize, 1, src, ld as isize, 1, T::zero(), dst, p as isize, 1);
                continue;
            }
            cols.resize(kk * ld, T::zero());
            for j in 0..nb {
                im2col(&xs[(b0 + j) * c * h * w..], c, h, w, self.k, self.stride, self.pad, &mut cols, ld, j * p);
            }
            res.resize(self.cout * ld, T::zero());
            T::gemm(self.cout, kk, ld, T::one(), wmat, kk as isize, 1, &cols, ld as isize, 1, T::zero(), &mut res, ld as isize, 1);
            let od = out.data_mut();
            for j in 0..nb {
                for co in 0..self.cout {
                    od[((b0 + j) * self.cout + co) * p..][..p].copy_from_slice(&res[co * ld + j * p..][..p]);
                }
            }
        }
        if let Some(bias) = self.bias {
            let bv = ps.value(bias).data();
            for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
                let v = bv[i % self.cout];
                plane.iter_mut().for_each(|o| *o += v);
            }
        }
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        out
    }

    pub fn backward(&mut self, ps: &mut ParamStore<T>, gout: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.cache.take().expect("conv backward without train forward");
        let (b, c, h, w) = x.dims4();
        let (_, _, oh, ow) = gout.dims4();
        let (kk, p) = (c * self.k * self.k, oh * ow);
        let chunk = self.chunk(p);
        let gd = gout.data();
        if let Some(bias) = self.bias {
            let db = ps.grad_mut(bias).data_mut();
            for (i, plane) in gd.chunks(p).enumerate() {
                db[i % self.cout] += plane.iter().copied().sum();
            }
        }
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut cols = Vec::new();
        let mut gmat = Vec::new();
        let mut dcols = Vec::new();
        for b0 in (0..b).step_by(chunk) {
            let nb = chunk.min(b - b0);
            let ld = nb * p;
            cols.resize(kk * ld, T::zero());
            gmat.resize(self.cout * ld, T::zero());
            for j in 0..nb {
                im2col(&x.data()[(b0 + j) * c * h * w..], c, h, w, self.k, self.stride, self.pad, &mut cols, ld, j * p);
                for co in 0..self.cout {
                    gmat[co * ld + j * p..][..p].copy_from_slice(&gd[((b0 + j) * self.cout + co) * p..][..p]);
                }
            }
            let (wv, wg) = ps.value_and_grad(self.weight);
            // dW (cout, kk) += G (cout, ld) x cols^T (ld, kk)
            T::gemm(self.cout, ld, kk, T::one(), &gmat, ld as isize, 1, &cols, 1, ld as isize, T::one(), wg.data_mut(), kk as isize, 1);
            if let Some(dx) = dx.as_mut() {
                dcols.resize(kk * ld, T::zero());
                // dcols (kk, ld) = W^T (kk, cout) x G (cout, ld)
                T::gemm(kk, self.cout, ld, T::one(), wv.data(), 1, kk as isize, &gmat, ld as isize, 1, T::zero(), &mut dcols, ld as isize, 1);
                for j in 0..nb {
                    let dst = &mut dx.data_mut()[(b0 + j) * c * h * w..(b0 + j + 1) * c * h * w];
                    col2im(&dcols, ld, j * p, c, h, w, self.k, self.stride, self.pad, dst);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let weight = ps.param(format!("{name}.weight"), Tensor::full(&[channels], T::one()));
        let bias = ps.param(format!("{name}.bias"), Tensor::zeros(&[channels]));
        let running_mean = ps.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = ps.buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        Self { weight, bias, running_mean, running_var, channels, eps: 1e-5, momentum: 0.1, cache: None }
    }

    pub fn forward(&mut self, ps: &mut ParamStore<T>, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "batch norm channels");
        let p = h * w;
        let n = b * p;
        let gamma = ps.value(self.weight).data().to_vec();
        let beta = ps.value(self.bias).data().to_vec();

        if mode == Mode::Eval || n <= 1 {
            let rm = ps.value(self.running_mean).data();
            let rv = ps.value(self.running_var).data();
            let (scale, shift): (Vec<T>, Vec<T>) = (0..c)
                .map(|ch| {
                    let s = gamma[ch] / (rv[ch] + T::lit(self.eps)).sqrt();
                    (s, beta[ch] - rm[ch] * s)
                })
                .unzip();
            for (i, plane) in x.data_mut().chunks_mut(p).enumerate() {
                let (s, t) = (scale[i % c], shift[i % c]);
                plane.iter_mut().for_each(|v| *v = *v * s + t);
            }
            return x;
        }

        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, plane) in x.data().chunks(p).enumerate() {
            let ch = i % c;
            let s: f64 = plane.iter().map(|v| v.as_f64()).sum();
            mean[ch] += s;
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for (i, plane) in x.data().chunks(p).enumerate() {
            let ch = i % c;
            let m = mean[ch];
            sq[ch] += plane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
        let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + self.eps).sqrt())).collect();

        let unbiased = |ch: usize| sq[ch] / (n - 1) as f64;
        {
            let mom = if mode == Mode::Calibrate { 1.0 } else { self.momentum };
            let rm = ps.value_mut(self.running_mean).data_mut();
            for ch in 0..c {
                rm[ch] = T::lit((1.0 - mom) * rm[ch].as_f64() + mom * mean[ch]);
            }
            let rv = ps.value_mut(self.running_var).data_mut();
            for ch in 0..c {
                rv[ch] = T::lit((1.0 - mom) * rv[ch].as_f64() + mom * unbiased(ch));
            }
        }

        for (i, plane) in x.data_mut().chunks_mut(p).enumerate() {
            let ch = i % c;
            let (m, is) = (T::lit(mean[ch]), inv_std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) * is);
        }
        if mode == Mode::Train {
            self.cache = Some((x.clone(), inv_std));
        }
        for (i, plane) in x.data_mut().chunks_mut(p).enumerate() {
            let ch = i % c;
            let (g, bt) = (gamma[ch], beta[ch]);
            plane.iter_mut().for_each(|v| *v = *v * g + bt);
        }
        x
    }

    pub fn backward(&mut self, ps: &mut ParamStore<T>, gout: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without train forward");
        let (b, c, h, w) = xhat.dims4();
        let p = h * w;
        let n = (b * p) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (i, (gp, xp)) in gout.data().chunks(p).zip(xhat.data().chunks(p)).enumerate() {
            let ch = i % c;
            for (g, x) in gp.iter().zip(xp) {
                sum_dy[ch] += g.as_f64();
                sum_dy_xhat[ch] += g.as_f64() * x.as_f64();
            }
        }
        {
            let db = ps.grad_mut(self.bias).data_mut();
            for ch in 0..c {
                db[ch] += T::lit(sum_dy[ch]);
            }
            let dg = ps.grad_mut(self.weight).data_mut();
            for ch in 0..c {
                dg[ch] += T::lit(sum_dy_xhat[ch]);
            }
        }
        let gamma = ps.value(self.weight).data();
        let mut dx = Tensor::zeros(xhat.shape());
        for (i, ((dp, gp), xp)) in dx.data_mut().chunks_mut(p).zip(gout.data().chunks(p)).zip(xhat.data().chunks(p)).enumerate() {
            let ch = i % c;
            let k = gamma[ch] * inv_std[ch];
            let (m1, m2) = (T::lit(sum_dy[ch] / n), T::lit(sum_dy_xhat[ch] / n));
            for ((d, &g), &x) in dp.iter_mut().zip(gp).zip(xp) {
                *d = k * (g - m1 - x * m2);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        x.map_inplace(|v| v.max(T::zero()));
        if mode == Mode::Train {
            self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        }
        x
    }

    pub fn backward<T: Scalar>(&mut self, mut g: Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("relu backward without train forward");
        for (v, m) in g.data_mut().iter_mut().zip(mask) {
            if !m {
                *v = T::zero();
            }
        }
        g
    }
}

/// 3x3 stride-2 max pooling with padding 1.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool {
    const K: usize = 3;
    const S: usize = 2;
    const P: usize = 1;

    pub fn forward<T: Scalar>(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c, h, w) = x.dims4();
        let (oh, ow) = (out_size(h, Self::K, Self::S, Self::P), out_size(w, Self::K, Self::S, Self::P));
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut arg = if mode == Mode::Train { vec![0usize; b * c * oh * ow] } else { Vec::new() };
        for (pi, (src, dst)) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for ky in 0..Self::K {
                        let iy = (oy * Self::S + ky) as isize - Self::P as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..Self::K {
                            let ix = (ox * Self::S + kx) as isize - Self::P as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    if mode == Mode::Train {
                        arg[pi * oh * ow + oy * ow + ox] = at;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((arg, x.shape().to_vec()));
        }
        out
    }

    pub fn backward<T: Scalar>(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let (arg, shape) = self.cache.take().expect("max pool backward without train forward");
        let (_, _, oh, ow) = g.dims4();
        let hw = shape[2] * shape[3];
        let mut dx = Tensor::zeros(&shape);
        for (pi, (gp, dp)) in g.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(hw)).enumerate() {
            for (j, &v) in gp.iter().enumerate() {
                dp[arg[pi * oh * ow + j]] += v;
            }
        }
        dx
    }
}

/// 2x2 stride-2 average pooling (odd trailing rows/columns dropped).
#[derive(Debug, Clone, Default)]
pub struct AvgPool2 {
    shape: Option<Vec<usize>>,
}

impl AvgPool2 {
    pub fn forward<T: Scalar>(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c, h, w) = x.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for oy in 0..oh {
                let (r0, r1) = (&src[2 * oy * w..], &src[(2 * oy + 1) * w..]);
                for ox in 0..ow {
                    dst[oy * ow + ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
                }
            }
        }
        if mode == Mode::Train {
            self.shape = Some(x.shape().to_vec());
        }
        out
    }

    pub fn backward<T: Scalar>(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let shape = self.shape.take().expect("avg pool backward without train forward");
        let (h, w) = (shape[2], shape[3]);
        let (_, _, oh, ow) = g.dims4();
        let quarter = T::lit(0.25);
        let mut dx = Tensor::zeros(&shape);
        for (gp, dp) in g.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = gp[oy * ow + ox] * quarter;
                    for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dp[(2 * oy + dy) * w + 2 * ox + dxo] += v;
                    }
                }
            }
        }
        dx
    }
}

/// Mean over the spatial dimensions: `(B, C, H, W) -> (B, C)`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c, h, w) = x.dims4();
        let inv = T::one() / T::from_usize_lossy(h * w);
        let data = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        if mode == Mode::Train {
            self.shape = Some(x.shape().to_vec());
        }
        Tensor::from_vec(&[b, c], data).expect("pooled shape")
    }

    pub fn backward<T: Scalar>(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let shape = self.shape.take().expect("global pool backward without train forward");
        let hw = shape[2] * shape[3];
        let inv = T::one() / T::from_usize_lossy(hw);
        let mut dx = Tensor::zeros(&shape);
        for (dp, &v) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
            dp.fill(v * inv);
        }
        dx
    }
}

/// `y = x W^T + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(ps: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = ps.param(format!("{name}.weight"), Tensor::zeros(&[fan_out, fan_in]));
        let bias = ps.param(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias, fan_in, fan_out, cache: None }
    }

    pub fn forward(&mut self, ps: &ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let b = x.shape()[0];
        assert_eq!(x.shape()[1], self.fan_in, "linear input width");
        let (i, o) = (self.fan_in, self.fan_out);
        let mut y = Tensor::zeros(&[b, o]);
        if b > 0 {
            let bv = ps.value(self.bias).data();
            for row in y.data_mut().chunks_mut(o) {
                row.copy_from_slice(bv);
            }
            let w = ps.value(self.weight).data();
            T::gemm(b, i, o, T::one(), x.data(), i as isize, 1, w, 1, i as isize, T::one(), y.data_mut(), o as isize, 1);
        }
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        y
    }

    pub fn backward(&mut self, ps: &mut ParamStore<T>, g: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.cache.take().expect("linear backward without train forward");
        let b = x.shape()[0];
        let (i, o) = (self.fan_in, self.fan_out);
        if b == 0 {
            return need_dx.then(|| Tensor::zeros(&[0, i]));
        }
        {
            let db = ps.grad_mut(self.bias).data_mut();
            for row in g.data().chunks(o) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let (w, wg) = ps.value_and_grad(self.weight);
        T::gemm(o, b, i, T::one(), g.data(), 1, o as isize, x.data(), i as isize, 1, T::one(), wg.data_mut(), i as isize, 1);
        need_dx.then(|| {
            let mut dx = Tensor::zeros(&[b, i]);
            T::gemm(b, o, i, T::one(), g.data(), o as isize, 1, w.data(), i as isize, 1, T::zero(), dx.data_mut(), i as isize, 1);
            dx
        })
    }
}
