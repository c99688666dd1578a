//! Residual and dense building blocks, each a trainable unit with its own
//! backward pass.

use dermres_core::{Scalar, Tensor};

use crate::layers::{AvgPool2, BatchNorm2d, Conv2d, MaxPool, Mode, Relu};
use crate::store::ParamStore;

fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    dst.add_assign(src);
}

/// Copy channels `lo..hi` of an NCHW tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, lo: usize, hi: usize) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let p = h * w;
    let mut out = Vec::with_capacity(b * (hi - lo) * p);
    for i in 0..b {
        out.extend_from_slice(&x.data()[(i * c + lo) * p..(i * c + hi) * p]);
    }
    Tensor::from_vec(&[b, hi - lo, h, w], out).expect("channel slice")
}

/// `dst[:, lo..lo + src_c] (+)= src`.
fn put_channels<T: Scalar>(dst: &mut Tensor<T>, lo: usize, src: &Tensor<T>, accumulate: bool) {
    let (b, c, h, w) = dst.dims4();
    let sc = src.shape()[1];
    let p = h * w;
    for i in 0..b {
        let d = &mut dst.data_mut()[(i * c + lo) * p..(i * c + lo + sc) * p];
        let s = &src.data()[i * sc * p..(i + 1) * sc * p];
        if accumulate {
            d.iter_mut().zip(s).for_each(|(a, &v)| *a += v);
        } else {
            d.copy_from_slice(s);
        }
    }
}

/// 7x7/2 convolution, batch norm, ReLU, 3x3/2 max pooling.
#[derive(Debug, Clone)]
pub struct Stem<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu,
    pool: MaxPool,
}

impl<T: Scalar> Stem<T> {
    pub fn new(ps: &mut ParamStore<T>, conv: &str, norm: &str) -> Self {
        Self {
            conv: Conv2d::new(ps, conv, 3, 64, 7, 2, 3, false),
            bn: BatchNorm2d::new(ps, norm, 64),
            relu: Relu::default(),
            pool: MaxPool::default(),
        }
    }

    fn forward(&mut self, ps: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let x = self.conv.forward(ps, x, mode);
        let x = self.bn.forward(ps, x, mode);
        let x = self.relu.forward(x, mode);
        self.pool.forward(x, mode)
    }

    fn backward(&mut self, ps: &mut ParamStore<T>, g: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let g = self.pool.backward(&g);
        let g = self.relu.backward(g);
        let g = self.bn.backward(ps, &g);
        self.conv.backward(ps, &g, need_dx)
    }
}

#[derive(Debug, Clone)]
struct Downsample<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> Downsample<T> {
    fn new(ps: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{prefix}.downsample.0"), cin, cout, 1, stride, 0, false),
            bn: BatchNorm2d::new(ps, &format!("{prefix}.downsample.1"), cout),
        }
    }

    fn forward(&mut self, ps: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let x = self.conv.forward(ps, x, mode);
        self.bn.forward(ps, x, mode)
    }

    fn backward(&mut self, ps: &mut ParamStore<T>, g: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let g = self.bn.backward(ps, g);
        self.conv.backward(ps, &g, need_dx)
    }
}

fn merge<T: Scalar>(a: Option<Tensor<T>>, b: Option<Tensor<T>>) -> Option<Tensor<T>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            add_into(&mut a, &b);
            Some(a)
        }
        (a, b) => a.or(b),
    }
}

/// Two 3x3 convolutions with an identity or projected shortcut.
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    down: Option<Downsample<T>>,
    relu_out: Relu,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv1: Conv2d::new(ps, &format!("{prefix}.conv1"), cin, cout, 3, stride, 1, false),
            bn1: BatchNorm2d::new(ps, &format!("{prefix}.bn1"), cout),
            relu1: Relu::default(),
            conv2: Conv2d::new(ps, &format!("{prefix}.conv2"), cout, cout, 3, 1, 1, false),
            bn2: BatchNorm2d::new(ps, &format!("{prefix}.bn2"), cout),
            down: (stride != 1 || cin != cout).then(|| Downsample::new(ps, prefix, cin, cout, stride)),
            relu_out: Relu::default(),
        }
    }

    fn forward(&mut self, ps: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let identity = match self.down.as_mut() {
            Some(d) => d.forward(ps, x.clone(), mode),
            None => x.clone(),
        };
        let y = self.conv1.forward(ps, x, mode);
        let y = self.bn1.forward(ps, y, mode);
        let y = self.relu1.forward(y, mode);
        let y = self.conv2.forward(ps, y, mode);
        let mut y = self.bn2.forward(ps, y, mode);
        add_into(&mut y, &identity);
        self.relu_out.forward(y, mode)
    }

    fn backward(&mut self, ps: &mut ParamStore<T>, g: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let g = self.relu_out.backward(g);
        let short = match self.down.as_mut() {
            Some(d) => d.backward(ps, &g, need_dx),
            None => need_dx.then(|| g.clone()),
        };
        let b = self.bn2.backward(ps, &g);
        let b = self.conv2.backward(ps, &b, true).expect("inner gradient");
        let b = self.relu1.backward(b);
        let b = self.bn1.backward(ps, &b);
        let b = self.conv1.backward(ps, &b, need_dx);
        merge(b, short)
    }
}

/// 1x1 reduce, 3x3 (carrying the stride), 1x1 expand by four.
#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu,
    conv3: Conv2d<T>,
    bn3: BatchNorm2d<T>,
    down: Option<Downsample<T>>,
    relu_out: Relu,
}

impl<T: Scalar> Bottleneck<T> {
    pub const EXPANSION: usize = 4;

    pub fn new(ps: &mut ParamStore<T>, prefix: &str, cin: usize, width: usize, stride: usize) -> Self {
        let cout = width * Self::EXPANSION;
        Self {
            conv1: Conv2d::new(ps, &format!("{prefix}.conv1"), cin, width, 1, 1, 0, false),
            bn1: BatchNorm2d::new(ps, &format!("{prefix}.bn1"), width),
            relu1: Relu::default(),
            conv2: Conv2d::new(ps, &format!("{prefix}.conv2"), width, width, 3, stride, 1, false),
            bn2: BatchNorm2d::new(ps, &format!("{prefix}.bn2"), width),
            relu2: Relu::default(),
            conv3: Conv2d::new(ps, &format!("{prefix}.conv3"), width, cout, 1, 1, 0, false),
            bn3: BatchNorm2d::new(ps, &format!("{prefix}.bn3"), cout),
            down: (stride != 1 || cin != cout).then(|| Downsample::new(ps, prefix, cin, cout, stride)),
            relu_out: Relu::default(),
        }
    }

    fn forward(&mut self, ps: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let identity = match self.down.as_mut() {
            Some(d) => d.forward(ps, x.clone(), mode),
            None => x.clone(),
        };
        let y = self.conv1.forward(ps, x, mode);
        let y = self.bn1.forward(ps, y, mode);
        let y = self.relu1.forward(y, mode);
        let y = self.conv2.forward(ps, y, mode);
        let y = self.bn2.forward(ps, y, mode);
        let y = self.relu2.forward(y, mode);
        let y = self.conv3.forward(ps, y, mode);
        let mut y = self.bn3.forward(ps, y, mode);
        add_into(&mut y, &identity);
        self.relu_out.forward(y, mode)
    }

    fn backward(&mut self, ps: &mut ParamStore<T>, g: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let g = self.relu_out.backward(g);
        let short = match self.down.as_mut() {
            Some(d) => d.backward(ps, &g, need_dx),
            None => need_dx.then(|| g.clone()),
        };
        let b = self.bn3.backward(ps, &g);
        let b = self.conv3.backward(ps, &b, true).expect("inner gradient");
        let b = self.relu2.backward(b);
        let b = self.bn2.backward(ps, &b);
        let b = self.conv2.backward(ps, &b, true).expect("inner gradient");
        let b = self.relu1.backward(b);
        let b = self.bn1.backward(ps, &b);
        let b = self.conv1.backward(ps, &b, need_dx);
        merge(b, short)
    }
}

/// BN-ReLU-1x1 conv to `bn_size * growth` channels, BN-ReLU-3x3 conv to
/// `growth` channels.
#[derive(Debug, Clone)]
struct DenseLayer<T> {
    norm1: BatchNorm2d<T>,
    relu1: Relu,
    conv1: Conv2d<T>,
    norm2: BatchNorm2d<T>,
    relu2: Relu,
    conv2: Conv2d<T>,
}

impl<T: Scalar> DenseLayer<T> {
    fn new(ps: &mut ParamStore<T>, prefix: &str, cin: usize, growth: usize, bn_size: usize) -> Self {
        let mid = bn_size * growth;
        Self {
            norm1: BatchNorm2d::new(ps, &format!("{prefix}.norm1"), cin),
            relu1: Relu::default(),
            conv1: Conv2d::new(ps, &format!("{prefix}.conv1"), cin, mid, 1, 1, 0, false),
            norm2: BatchNorm2d::new(ps, &format!("{prefix}.norm2"), mid),
            relu2: Relu::default(),
            conv2: Conv2d::new(ps, &format!("{prefix}.conv2"), mid, growth, 3, 1, 1, false),
        }
    }

    fn forward(&mut self, ps: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.norm1.forward(ps, x, mode);
        let y = self.relu1.forward(y, mode);
        let y = self.conv1.forward(ps, y, mode);
        let y = self.norm2.forward(ps, y, mode);
        let y = self.relu2.forward(y, mode);
        self.conv2.forward(ps, y, mode)
    }

    fn backward(&mut self, ps: &mut ParamStore<T>, g: &Tensor<T>) -> Tensor<T> {
        let g = self.conv2.backward(ps, g, true).expect("inner gradient");
        let g = self.relu2.backward(g);
        let g = self.norm2.backward(ps, &g);
        let g = self.conv1.backward(ps, &g, true).expect("inner gradient");
        let g = self.relu1.backward(g);
        self.norm1.backward(ps, &g)
    }
}

/// Each layer sees the concatenation of the block input and all earlier
/// layer outputs.
#[derive(Debug, Clone)]
pub struct DenseBlock<T> {
    layers: Vec<DenseLayer<T>>,
    cin: usize,
    growth: usize,
}

impl<T: Scalar> DenseBlock<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str, n: usize, cin: usize, growth: usize, bn_size: usize) -> Self {
        let layers = (0..n)
            .map(|i| DenseLayer::new(ps, &format!("{prefix}.denselayer{}", i + 1), cin + i * growth, growth, bn_size))
            .collect();
        Self { layers, cin, growth }
    }

    pub fn out_channels(&self) -> usize {
        self.cin + self.layers.len() * self.growth
    }

    fn forward(&mut self, ps: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, _, h, w) = x.dims4();
        let mut buf = Tensor::zeros(&[b, self.out_channels(), h, w]);
        put_channels(&mut buf, 0, &x, false);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let c = self.cin + i * self.growth;
            let input = if i == 0 { x.clone() } else { slice_channels(&buf, 0, c) };
            let y = layer.forward(ps, input, mode);
            put_channels(&mut buf, c, &y, false);
        }
        buf
    }

    fn backward(&mut self, ps: &mut ParamStore<T>, g: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let mut g = g;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let c = self.cin + i * self.growth;
            let gi = slice_channels(&g, c, c + self.growth);
            let dx = layer.backward(ps, &gi);
            put_channels(&mut g, 0, &dx, true);
        }
        need_dx.then(|| slice_channels(&g, 0, self.cin))
    }
}

/// BN-ReLU-1x1 conv halving the channels, then 2x2 average pooling.
#[derive(Debug, Clone)]
pub struct Transition<T> {
    norm: BatchNorm2d<T>,
    relu: Relu,
    conv: Conv2d<T>,
    pool: AvgPool2,
}

impl<T: Scalar> Transition<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            norm: BatchNorm2d::new(ps, &format!("{prefix}.norm"), cin),
            relu: Relu::default(),
            conv: Conv2d::new(ps, &format!("{prefix}.conv"), cin, cout, 1, 1, 0, false),
            pool: AvgPool2::default(),
        }
    }

    fn forward(&mut self, ps: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.norm.forward(ps, x, mode);
        let y = self.relu.forward(y, mode);
        let y = self.conv.forward(ps, y, mode);
        self.pool.forward(y, mode)
    }

    fn backward(&mut self, ps: &mut ParamStore<T>, g: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let g = self.pool.backward(&g);
        let g = self.conv.backward(ps, &g, true).expect("inner gradient");
        let g = self.relu.backward(g);
        let dx = self.norm.backward(ps, &g);
        need_dx.then_some(dx)
    }
}

/// Closing batch norm and ReLU of the dense feature extractor.
#[derive(Debug, Clone)]
pub struct FinalNorm<T> {
    norm: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Scalar> FinalNorm<T> {
    pub fn new(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self { norm: BatchNorm2d::new(ps, name, channels), relu: Relu::default() }
    }
}

/// One freezable stage of a backbone.
#[derive(Debug, Clone)]
pub enum Unit<T> {
    Stem(Stem<T>),
    Basic(BasicBlock<T>),
    Bottleneck(Bottleneck<T>),
    Dense(DenseBlock<T>),
    Transition(Transition<T>),
    FinalNorm(FinalNorm<T>),
}

impl<T: Scalar> Unit<T> {
    pub fn forward(&mut self, ps: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        match self {
            Unit::Stem(u) => u.forward(ps, x, mode),
            Unit::Basic(u) => u.forward(ps, x, mode),
            Unit::Bottleneck(u) => u.forward(ps, x, mode),
            Unit::Dense(u) => u.forward(ps, x, mode),
            Unit::Transition(u) => u.forward(ps, x, mode),
            Unit::FinalNorm(u) => {
                let y = u.norm.forward(ps, x, mode);
                u.relu.forward(y, mode)
            }
        }
    }

    pub fn backward(&mut self, ps: &mut ParamStore<T>, g: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        match self {
            Unit::Stem(u) => u.backward(ps, g, need_dx),
            Unit::Basic(u) => u.backward(ps, g, need_dx),
            Unit::Bottleneck(u) => u.backward(ps, g, need_dx),
            Unit::Dense(u) => u.backward(ps, g, need_dx),
            Unit::Transition(u) => u.backward(ps, g, need_dx),
            Unit::FinalNorm(u) => {
                let g = u.relu.backward(g);
                let dx = u.norm.backward(ps, &g);
                need_dx.then_some(dx)
            }
        }
    }
}
