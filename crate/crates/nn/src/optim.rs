//! First-order optimisers with a separate learning-rate scale for the head.

use dermres_core::{OptimizerKind, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{ParamStore, Partition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    /// SGDM momentum; also the first-moment decay of Adam.
    pub momentum: f64,
    /// RMSProp squared-gradient decay; second-moment decay of Adam.
    pub square_decay: f64,
    pub epsilon: f64,
    pub head_lr_multiplier: f64,
    pub weight_decay: f64,
}

impl OptimizerSpec {
    /// SGDM lr 1e-3 and momentum 0.9; RMSProp and Adam lr 1e-4; head x10.
    pub fn standard(kind: OptimizerKind) -> Self {
        let (base_lr, square_decay) = match kind {
            OptimizerKind::Sgdm => (1e-3, 0.0),
            OptimizerKind::RmsProp => (1e-4, 0.9),
            OptimizerKind::Adam => (1e-4, 0.999),
        };
        Self { kind, base_lr, momentum: 0.9, square_decay, epsilon: 1e-8, head_lr_multiplier: 10.0, weight_decay: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.head_lr_multiplier > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.square_decay)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimiser settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Slot<T> {
    Empty,
    Velocity(Vec<T>),
    Square(Vec<T>),
    Moments(Vec<T>, Vec<T>),
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub spec: OptimizerSpec,
    slots: Vec<Slot<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self { spec, slots: Vec::new(), steps: 0 }
    }

    /// One update of every trainable entry that has a gradient, with
    /// `backbone_lr` for the backbone and `backbone_lr * multiplier` for
    /// the head. Frozen entries and buffers are never touched.
    pub fn step(&mut self, ps: &mut ParamStore<T>, backbone_lr: f64) {
        let s = self.spec;
        self.steps += 1;
        if self.slots.len() < ps.len() {
            self.slots.resize(ps.len(), Slot::Empty);
        }
        let t = self.steps as i32;
        for (e, slot) in ps.entries_mut().iter_mut().zip(&mut self.slots) {
            if !e.trainable() {
                continue;
            }
            let Some(grad) = e.grad.as_ref() else { continue };
            let lr = if e.partition == Partition::Head { backbone_lr * s.head_lr_multiplier } else { backbone_lr };
            let n = e.value.len();
            let wd = T::lit(s.weight_decay);
            let g_at = |i: usize, w: T| grad.data()[i] + wd * w;
            let w = e.value.data_mut();
            match s.kind {
                OptimizerKind::Sgdm => {
                    if matches!(slot, Slot::Empty) {
                        *slot = Slot::Velocity(vec![T::zero(); n]);
                    }
                    let Slot::Velocity(v) = slot else { unreachable!() };
                    let (mu, lr) = (T::lit(s.momentum), T::lit(lr));
                    for i in 0..n {
                        v[i] = mu * v[i] - lr * g_at(i, w[i]);
                        w[i] += v[i];
                    }
                }
                OptimizerKind::RmsProp => {
                    if matches!(slot, Slot::Empty) {
                        *slot = Slot::Square(vec![T::zero(); n]);
                    }
                    let Slot::Square(sq) = slot else { unreachable!() };
                    let (rho, lr, eps) = (T::lit(s.square_decay), T::lit(lr), T::lit(s.epsilon));
                    for i in 0..n {
                        let g = g_at(i, w[i]);
                        sq[i] = rho * sq[i] + (T::one() - rho) * g * g;
                        w[i] -= lr * g / (sq[i].sqrt() + eps);
                    }
                }
                OptimizerKind::Adam => {
                    if matches!(slot, Slot::Empty) {
                        *slot = Slot::Moments(vec![T::zero(); n], vec![T::zero(); n]);
                    }
                    let Slot::Moments(m, v) = slot else { unreachable!() };
                    let (b1, b2) = (s.momentum, s.square_decay);
                    let step = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
                    let (b1, b2, step, eps) = (T::lit(b1), T::lit(b2), T::lit(step), T::lit(s.epsilon));
                    for i in 0..n {
                        let g = g_at(i, w[i]);
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        w[i] -= step * m[i] / (v[i].sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mean cross-entropy of `(B, 3)` logits against class indices, with the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(b, labels.len(), "one label per row");
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    for (i, (row, g)) in logits.data().chunks(k).zip(grad.data_mut().chunks_mut(k)).enumerate() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        loss += z.ln() + m - row[labels[i]].as_f64();
        for j in 0..k {
            let p = e[j] / z - if j == labels[i] { 1.0 } else { 0.0 };
            g[j] = T::lit(p / b as f64);
        }
    }
    (loss / b.max(1) as f64, grad)
}
