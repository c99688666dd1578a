//! The eight-element dihedral group acting on square images.
//!
//! An element is "horizontal flip (optional), then counter-clockwise rotation
//! by a multiple of 90 degrees". The canonical enumeration is
//! `hflip in {false, true}` outer, rotation ascending inner.

use std::fmt;

use crate::error::ShapeError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> u8 {
        self as u8
    }

    pub fn from_quarter_turns(q: i32) -> Self {
        Self::ALL[q.rem_euclid(4) as usize]
    }

    pub fn degrees(self) -> u32 {
        90 * self.quarter_turns() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DihedralElement {
    pub hflip: bool,
    pub rotation: Rotation,
}

impl fmt::Display for DihedralElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}rot{}", if self.hflip { "flip+" } else { "" }, self.rotation.degrees())
    }
}

impl DihedralElement {
    pub const IDENTITY: DihedralElement = DihedralElement { hflip: false, rotation: Rotation::R0 };

    /// All eight elements in canonical order.
    pub fn all() -> [DihedralElement; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, e) in out.iter_mut().enumerate() {
            *e = DihedralElement { hflip: i >= 4, rotation: Rotation::ALL[i % 4] };
        }
        out
    }

    pub fn index(self) -> usize {
        usize::from(self.hflip) * 4 + self.rotation.quarter_turns() as usize
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(self, other: DihedralElement) -> DihedralElement {
        // R^a F^p R^b F^q = R^(a + (-1)^p b) F^(p xor q)
        let a = self.rotation.quarter_turns() as i32;
        let b = other.rotation.quarter_turns() as i32;
        let b = if self.hflip { -b } else { b };
        DihedralElement { hflip: self.hflip ^ other.hflip, rotation: Rotation::from_quarter_turns(a + b) }
    }

    pub fn inverse(self) -> DihedralElement {
        if self.hflip {
            self
        } else {
            DihedralElement { hflip: false, rotation: Rotation::from_quarter_turns(-(self.rotation.quarter_turns() as i32)) }
        }
    }

    /// Source pixel for output pixel `(row, col)` of an `n x n` image.
    #[inline]
    fn source(self, row: usize, col: usize, n: usize) -> (usize, usize) {
        let last = n - 1;
        let (r, c) = match self.rotation {
            Rotation::R0 => (row, col),
            Rotation::R90 => (col, last - row),
            Rotation::R180 => (last - row, last - col),
            Rotation::R270 => (last - col, row),
        };
        if self.hflip {
            (r, last - c)
        } else {
            (r, c)
        }
    }

    fn permute_planes<T: Scalar>(self, src: &[T], dst: &mut [T], planes: usize, n: usize) {
        let plane = n * n;
        for p in 0..planes {
            let s = &src[p * plane..(p + 1) * plane];
            let d = &mut dst[p * plane..(p + 1) * plane];
            for row in 0..n {
                for col in 0..n {
                    let (r, c) = self.source(row, col, n);
                    d[row * n + col] = s[r * n + c];
                }
            }
        }
    }

    /// Apply to a `(C, N, N)` image or an `(B, C, N, N)` batch.
    pub fn apply<T: Scalar>(self, tensor: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
        let shape = tensor.shape();
        if shape.len() < 2 {
            return Err(ShapeError::new(format!("need at least 2 spatial dims, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h != w {
            return Err(ShapeError::new(format!("dihedral transforms need a square image, got {h}x{w}")));
        }
        if self == Self::IDENTITY || h == 0 {
            return Ok(tensor.clone());
        }
        let planes = tensor.len() / (h * w);
        let mut out = Tensor::zeros(shape);
        self.permute_planes(tensor.data(), out.data_mut(), planes, h);
        Ok(out)
    }
}

/// The eight transformed copies of `tensor` in canonical element order.
pub fn orbit<T: Scalar>(tensor: &Tensor<T>) -> Result<Vec<Tensor<T>>, ShapeError> {
    DihedralElement::all().iter().map(|g| g.apply(tensor)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(n: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[3, n, n], f)
    }

    #[test]
    fn canonical_order() {
        let all = DihedralElement::all();
        assert_eq!(all[0], DihedralElement::IDENTITY);
        assert_eq!(all[1].rotation, Rotation::R90);
        assert!(!all[3].hflip && all[4].hflip);
        for (i, g) in all.iter().enumerate() {
            assert_eq!(g.index(), i);
        }
    }

    #[test]
    fn rotation_is_counter_clockwise() {
        // [[1, 2], [3, 4]] rotated CCW is [[2, 4], [1, 3]]
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = DihedralElement { hflip: false, rotation: Rotation::R90 };
        assert_eq!(g.apply(&x).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        // flip first: [[2, 1], [4, 3]], then CCW: [[1, 3], [2, 4]]
        let g = DihedralElement { hflip: true, rotation: Rotation::R90 };
        assert_eq!(g.apply(&x).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn identity_and_half_turn_involution() {
        let x = t(5, |i| i as f64);
        assert_eq!(DihedralElement::IDENTITY.apply(&x).unwrap(), x);
        let half = DihedralElement { hflip: false, rotation: Rotation::R180 };
        assert_eq!(half.apply(&half.apply(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn distinct_pixels_give_eight_distinct_images() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let o = orbit(&x).unwrap();
        assert_eq!(o.len(), 8);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(o[i], o[j], "elements {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn constant_orbit() {
        let x = Tensor::<f32>::full(&[3, 4, 4], 2.5);
        assert!(orbit(&x).unwrap().iter().all(|y| *y == x));
    }

    #[test]
    fn non_square_rejected() {
        let x = Tensor::<f32>::zeros(&[3, 4, 5]);
        assert!(DihedralElement::all()[1].apply(&x).is_err());
        assert!(orbit(&x).is_err());
    }

    #[test]
    fn group_closure_against_brute_force() {
        let x = t(4, |i| (i as f64 * 0.913).sin());
        let images: Vec<_> = DihedralElement::all().iter().map(|k| k.apply(&x).unwrap()).collect();
        for g in DihedralElement::all() {
            for h in DihedralElement::all() {
                let gh = g.apply(&h.apply(&x).unwrap()).unwrap();
                let found: Vec<_> = (0..8).filter(|&k| images[k] == gh).collect();
                assert_eq!(found.len(), 1);
                assert_eq!(found[0], g.compose(h).index());
            }
            assert_eq!(g.compose(g.inverse()), DihedralElement::IDENTITY);
        }
    }

    #[test]
    fn batch_apply_matches_per_item() {
        let b = Tensor::<f64>::from_fn(&[2, 3, 3, 3], |i| i as f64);
        let g = DihedralElement { hflip: true, rotation: Rotation::R270 };
        let out = g.apply(&b).unwrap();
        for i in 0..2 {
            assert_eq!(out.batch_item(i), g.apply(&b.batch_item(i)).unwrap());
        }
    }

    fn sorted(v: &Tensor<f64>) -> Vec<f64> {
        let mut d = v.data().to_vec();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d
    }

    fn sorted_orbit(x: &Tensor<f64>) -> Vec<Vec<f64>> {
        let mut o: Vec<Vec<f64>> = orbit(x).unwrap().into_iter().map(Tensor::into_vec).collect();
        o.sort_by(|a, b| a.partial_cmp(b).unwrap());
        o
    }

    proptest! {
        #[test]
        fn lossless_and_orbit_invariant(vals in proptest::collection::vec(-100.0f64..100.0, 48)) {
            let x = Tensor::from_vec(&[3, 4, 4], vals).unwrap();
            let base = sorted_orbit(&x);
            for g in DihedralElement::all() {
                let gx = g.apply(&x).unwrap();
                prop_assert_eq!(sorted(&gx), sorted(&x));
                prop_assert_eq!(sorted_orbit(&gx), base.clone());
            }
        }
    }
}
