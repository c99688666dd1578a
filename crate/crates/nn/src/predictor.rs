//! Dihedral test-time augmentation and per-split prediction tables.

use std::collections::HashMap;
use std::path::Path;

use dermres_core::fsutil::sha256_hex;

use dermres_core::preprocess::{load_cached, missing_cache_entries};
use dermres_core::{
    orbit, CompensatedSum, DatasetManifest, PredictionTable, PreprocessConfig, ProbabilityVector, Scalar, Split, Tensor,
};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{AdaptedModel, NUM_CLASSES};

/// Anything that maps a `(B, 3, R, R)` batch to `(B, 3)` logits.
pub trait Classifier<T> {
    fn logits(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Classifier<T> for AdaptedModel<T> {
    fn logits(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(batch)
    }
}

/// Frozen-prefix outputs keyed by frozen-weight digest and input bytes, so
/// runs sharing a frozen prefix compute test features once.
#[derive(Debug)]
pub struct FeatureMemo<T> {
    budget_bytes: usize,
    used_bytes: usize,
    entries: HashMap<(String, String), Tensor<T>>,
}

impl<T: Scalar> FeatureMemo<T> {
    pub fn new(budget_bytes: usize) -> Self {
        Self { budget_bytes, used_bytes: 0, entries: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A model whose frozen-prefix features go through a [`FeatureMemo`].
pub struct MemoizedModel<'a, T> {
    model: &'a mut AdaptedModel<T>,
    digest: String,
    memo: &'a mut FeatureMemo<T>,
}

impl<'a, T: Scalar> MemoizedModel<'a, T> {
    pub fn new(model: &'a mut AdaptedModel<T>, memo: &'a mut FeatureMemo<T>) -> Self {
        let digest = model.frozen_digest();
        Self { model, digest, memo }
    }
}

impl<T: Scalar> Classifier<T> for MemoizedModel<'_, T> {
    fn logits(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut bytes = Vec::new();
        for d in batch.shape() {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        T::write_le(batch.data(), &mut bytes);
        let key = (self.digest.clone(), sha256_hex(&bytes));
        let feats = match self.memo.entries.get(&key) {
            Some(f) => f.clone(),
            None => {
                let f = self.model.frozen_features(batch)?;
                let size = f.len() * std::mem::size_of::<T>();
                if self.memo.used_bytes + size <= self.memo.budget_bytes {
                    self.memo.used_bytes += size;
                    self.memo.entries.insert(key, f.clone());
                }
                f
            }
        };
        Ok(self.model.forward_trainable(feats, Mode::Eval))
    }
}

/// Mean of the softmax outputs over the eight orientations of a
/// `(3, R, R)` image, accumulated in canonical element order.
pub fn tta_predict<T: Scalar>(
    model: &mut dyn Classifier<T>,
    image: &Tensor<T>,
    context: &str,
) -> Result<ProbabilityVector<T>> {
    let batch = Tensor::stack(&orbit(image)?)?;
    let logits = model.logits(&batch)?;
    if logits.shape() != [8, NUM_CLASSES] {
        return Err(Error::contract(format!("classifier returned {:?} for 8 inputs", logits.shape())));
    }
    if !logits.all_finite() {
        return Err(Error::Inference { context: context.to_string() });
    }
    let mut sums = [CompensatedSum::new(), CompensatedSum::new(), CompensatedSum::new()];
    for row in logits.data().chunks(NUM_CLASSES) {
        let p = ProbabilityVector::softmax([row[0], row[1], row[2]]);
        for (s, v) in sums.iter_mut().zip(p.0) {
            s.add(v);
        }
    }
    let eight = T::lit(8.0);
    let p = ProbabilityVector(sums.map(|s| s.total() / eight));
    p.check()?;
    Ok(p)
}

/// One row per image of `split`. Missing cache entries are reported
/// together before any inference starts.
pub fn predict_dataset<T: Scalar>(
    model: &mut dyn Classifier<T>,
    manifest: &DatasetManifest,
    split: Split,
    preprocess: &PreprocessConfig,
    cache_root: &Path,
    source_id: &str,
) -> Result<PredictionTable<T>> {
    let records: Vec<_> = manifest.split(split).collect();
    let missing = missing_cache_entries(records.iter().copied(), preprocess, cache_root);
    if !missing.is_empty() {
        return Err(Error::Prerequisite {
            stage: "preprocess",
            detail: format!(
                "{} {split} images lack a cache entry at {} px, e.g. {:?}",
                missing.len(),
                preprocess.target_resolution,
                &missing[..missing.len().min(3)]
            ),
        });
    }
    let mut table = PredictionTable::new(source_id);
    for r in records {
        let x: Tensor<T> = load_cached(cache_root, preprocess, &r.image_id)?;
        let p = tta_predict(model, &x, &format!("{source_id}/{}", r.image_id))?;
        table.insert(r.image_id.clone(), p)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dermres_core::DihedralElement;

    struct Constant([f64; 3]);

    impl Classifier<f64> for Constant {
        fn logits(&mut self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
            let b = batch.shape()[0];
            Ok(Tensor::from_fn(&[b, 3], |i| self.0[i % 3]))
        }
    }

    /// Logits depend on the orientation through the top-left pixel.
    struct Corner;

    impl Classifier<f64> for Corner {
        fn logits(&mut self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
            let (b, c, h, w) = batch.dims4();
            let plane = c * h * w;
            Ok(Tensor::from_fn(&[b, 3], |i| {
                let v = batch.data()[(i / 3) * plane];
                [v, -v, 0.0][i % 3]
            }))
        }
    }

    #[test]
    fn constant_logits_give_uniform() {
        let x = Tensor::<f64>::zeros(&[3, 4, 4]);
        let p = tta_predict(&mut Constant([2.0; 3]), &x, "t").unwrap();
        for v in p.0 {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn averages_probabilities_not_logits() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 2], |i| [4.0, 0.0, 0.0, -4.0][i % 4]);
        let p = tta_predict(&mut Corner, &x, "t").unwrap();
        let mut want = [0.0; 3];
        let mut mean_logit = [0.0; 3];
        for g in DihedralElement::all() {
            let v = g.apply(&x).unwrap().data()[0];
            let s = ProbabilityVector::softmax([v, -v, 0.0]);
            for k in 0..3 {
                want[k] += s.0[k] / 8.0;
                mean_logit[k] += [v, -v, 0.0][k] / 8.0;
            }
        }
        let of_mean = ProbabilityVector::softmax(mean_logit);
        for k in 0..3 {
            assert!((p.0[k] - want[k]).abs() < 1e-12);
        }
        assert!((p.0[0] - of_mean.0[0]).abs() > 0.05);
    }

    #[test]
    fn non_finite_logits_are_an_inference_error() {
        let x = Tensor::<f64>::zeros(&[3, 2, 2]);
        match tta_predict(&mut Constant([f64::NAN, 0.0, 0.0]), &x, "run/img") {
            Err(Error::Inference { context }) => assert_eq!(context, "run/img"),
            other => panic!("{other:?}"),
        }
    }
}
