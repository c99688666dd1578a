//! Ternary probability vectors and per-image prediction tables.
//!
//! CSV form: header `image_id,p_mm,p_sk,p_bn`, rows sorted by image_id,
//! probabilities written with 9 significant digits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::catalog::Label;
use crate::error::{Error, Result};
use crate::fsutil::write_if_changed;
use crate::scalar::Scalar;

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
const HEADER: [&str; 4] = ["image_id", "p_mm", "p_sk", "p_bn"];

/// `(p_MM, p_SK, p_BN)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityVector<T>(pub [T; 3]);

impl<T: Scalar> ProbabilityVector<T> {
    /// Construct, checking the simplex invariant.
    pub fn new(p: [T; 3]) -> Result<Self> {
        let v = Self(p);
        v.check()?;
        Ok(v)
    }

    pub fn uniform() -> Self {
        let third = T::one() / T::lit(3.0);
        Self([third; 3])
    }

    pub fn one_hot(label: Label) -> Self {
        let mut p = [T::zero(); 3];
        p[label.index()] = T::one();
        Self(p)
    }

    pub fn get(&self, label: Label) -> T {
        self.0[label.index()]
    }

    pub fn check(&self) -> Result<()> {
        let tol = T::lit(SIMPLEX_TOLERANCE);
        let sum = self.0[0] + self.0[1] + self.0[2];
        let in_range = self.0.iter().all(|&p| p.is_finite() && p >= -tol && p <= T::one() + tol);
        if !in_range || (sum - T::one()).abs() > tol {
            return Err(Error::Contract(format!(
                "not a probability vector: ({}, {}, {}), sum {}",
                self.0[0], self.0[1], self.0[2], sum
            )));
        }
        Ok(())
    }

    /// Numerically stable softmax of three logits.
    pub fn softmax(logits: [T; 3]) -> Self {
        let m = logits[0].max(logits[1]).max(logits[2]);
        let e = logits.map(|z| (z - m).exp());
        let s = e[0] + e[1] + e[2];
        Self(e.map(|v| v / s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable<T> {
    /// Run id or fusion node id.
    pub source_id: String,
    pub rows: BTreeMap<String, ProbabilityVector<T>>,
}

/// Format with `digits` significant digits in positional notation.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - exponent).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

impl<T: Scalar> PredictionTable<T> {
    pub fn new(source_id: impl Into<String>) -> Self {
        Self { source_id: source_id.into(), rows: BTreeMap::new() }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, p: ProbabilityVector<T>) -> Result<()> {
        p.check()?;
        let id = image_id.into();
        if self.rows.contains_key(&id) {
            return Err(Error::Contract(format!("duplicate image_id {id:?} in table {}", self.source_id)));
        }
        self.rows.insert(id, p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = HEADER.join(",");
        out.push('\n');
        for (id, p) in &self.rows {
            out.push_str(id);
            for v in p.0 {
                out.push(',');
                out.push_str(&format_significant(v.as_f64(), 9));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(source_id: impl Into<String>, text: &str, origin: &Path) -> Result<Self> {
        let schema = |row: usize, message: String| Error::Schema { path: origin.to_path_buf(), row, message };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> =
            reader.headers().map_err(|e| schema(0, e.to_string()))?.iter().map(str::to_string).collect();
        if header != HEADER {
            return Err(schema(0, format!("bad header {header:?}")));
        }
        let mut table = Self::new(source_id);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| schema(i + 1, e.to_string()))?;
            if rec.len() != 4 {
                return Err(schema(i + 1, format!("expected 4 fields, got {}", rec.len())));
            }
            let mut p = [T::zero(); 3];
            for (k, slot) in p.iter_mut().enumerate() {
                let v: f64 = rec[k + 1].trim().parse().map_err(|_| schema(i + 1, format!("bad number {:?}", &rec[k + 1])))?;
                *slot = T::lit(v);
            }
            let p = ProbabilityVector::new(p).map_err(|e| schema(i + 1, e.to_string()))?;
            table.insert(rec[0].to_string(), p).map_err(|e| schema(i + 1, e.to_string()))?;
        }
        Ok(table)
    }

    /// Persist to `<dir>/<source_id>.csv`; returns the path. The file is
    /// left untouched when its content would not change.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = table_path(dir, &self.source_id);
        write_if_changed(&path, self.to_csv().as_bytes())?;
        Ok(path)
    }

    pub fn load(dir: &Path, source_id: &str) -> Result<Self> {
        let path = table_path(dir, source_id);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_csv(source_id, &text, &path)
    }
}

/// `<dir>/<source_id>.csv`; node ids containing `/` map to subdirectories.
pub fn table_path(dir: &Path, source_id: &str) -> PathBuf {
    dir.join(format!("{source_id}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(1.0 / 3.0, 9), "0.333333333");
        assert_eq!(format_significant(0.5, 9), "0.5");
        assert_eq!(format_significant(1.0, 9), "1");
        assert_eq!(format_significant(0.0, 9), "0");
        assert_eq!(format_significant(1.234567891e-5, 9), "0.0000123456789");
    }

    #[test]
    fn simplex_check() {
        assert!(ProbabilityVector::new([0.2f64, 0.3, 0.5]).is_ok());
        assert!(ProbabilityVector::new([0.2f64, 0.3, 0.6]).is_err());
        assert!(ProbabilityVector::new([-0.1f64, 0.6, 0.5]).is_err());
        let s = ProbabilityVector::softmax([0.0f64, 0.0, 0.0]);
        assert!((s.0[0] - 1.0 / 3.0).abs() < 1e-15);
        let big = ProbabilityVector::softmax([1000.0f64, 0.0, -1000.0]);
        assert!(big.check().is_ok());
    }

    #[test]
    fn empty_table_has_header_only() {
        let t = PredictionTable::<f64>::new("x");
        assert_eq!(t.to_csv(), "image_id,p_mm,p_sk,p_bn\n");
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        assert!(PredictionTable::<f64>::load(dir.path(), "x").unwrap().is_empty());
    }

    #[test]
    fn nested_ids_and_sorting() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = PredictionTable::<f64>::new("L1/resnet18/128");
        t.insert("b", ProbabilityVector::uniform()).unwrap();
        t.insert("a", ProbabilityVector::one_hot(Label::Sk)).unwrap();
        assert!(t.insert("a", ProbabilityVector::uniform()).is_err());
        let p = t.save(dir.path()).unwrap();
        assert!(p.ends_with("L1/resnet18/128.csv"));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("image_id,p_mm,p_sk,p_bn\na,0,1,0\nb,"));
    }

    proptest! {
        #[test]
        fn csv_reread_is_stable(ps in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30)) {
            let mut t = PredictionTable::<f64>::new("run");
            for (i, (a, b, c)) in ps.iter().enumerate() {
                let s = a + b + c + 1e-9;
                t.insert(format!("img{i:03}"), ProbabilityVector::new([a / s, b / s, c / s]).unwrap()).unwrap();
            }
            let text = t.to_csv();
            let back = PredictionTable::<f64>::from_csv("run", &text, Path::new("mem")).unwrap();
            for (id, p) in &t.rows {
                for k in 0..3 {
                    prop_assert!((back.rows[id].0[k] - p.0[k]).abs() <= 1e-9 * p.0[k].abs().max(1e-9) * 10.0);
                }
            }
            prop_assert_eq!(back.to_csv(), text);
        }
    }
}
