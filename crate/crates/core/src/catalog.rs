//! Dataset manifest: ingest, validation and split access.
//!
//! The manifest is a UTF-8 CSV with the header `image_id,file_path,label,split`.
//! Two optional trailing columns `width_px,height_px` declare the expected
//! decoded size; when present, [`verify_dataset`] checks them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BASE_HEADER: [&str; 4] = ["image_id", "file_path", "label", "split"];
const DIM_HEADER: [&str; 2] = ["width_px", "height_px"];

/// Lesion class. Declaration order (MM, SK, BN) is also the probability
/// vector order and the argmax tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "MM")]
    Mm,
    #[serde(rename = "SK")]
    Sk,
    #[serde(rename = "BN")]
    Bn,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Mm, Label::Sk, Label::Bn];

    pub fn index(self) -> usize {
        match self {
            Label::Mm => 0,
            Label::Sk => 1,
            Label::Bn => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Mm => "MM",
            Label::Sk => "SK",
            Label::Bn => "BN",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MM" => Ok(Label::Mm),
            "SK" => Ok(Label::Sk),
            "BN" => Ok(Label::Bn),
            _ => Err(format!("unknown label token {s:?} (expected MM, SK or BN)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split token {s:?} (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Path exactly as written in the manifest.
    pub file_path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub width_px: Option<u32>,
    pub height_px: Option<u32>,
}

pub type ClassCounts = BTreeMap<Split, BTreeMap<Label, usize>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory relative file paths are resolved against.
    pub base_dir: PathBuf,
    pub records: Vec<ImageRecord>,
    pub class_counts: ClassCounts,
    has_dimension_columns: bool,
}

fn count_classes(records: &[ImageRecord]) -> ClassCounts {
    let mut counts = ClassCounts::new();
    for split in [Split::Train, Split::Test] {
        counts.insert(split, Label::ALL.iter().map(|&l| (l, 0)).collect());
    }
    for r in records {
        *counts.get_mut(&r.split).unwrap().get_mut(&r.label).unwrap() += 1;
    }
    counts
}

impl DatasetManifest {
    /// Build a manifest from records, rejecting duplicate ids.
    pub fn new(base_dir: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Result<Self> {
        let base_dir = base_dir.into();
        let mut seen = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Schema {
                    path: base_dir.clone(),
                    row: i + 1,
                    message: format!("duplicate image_id {:?}", r.image_id),
                });
            }
        }
        let has_dimension_columns =
            !records.is_empty() && records.iter().all(|r| r.width_px.is_some() && r.height_px.is_some());
        let class_counts = count_classes(&records);
        Ok(Self { base_dir, records, class_counts, has_dimension_columns })
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.file_path.is_absolute() {
            record.file_path.clone()
        } else {
            self.base_dir.join(&record.file_path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Records of a split, failing when the split is empty.
    pub fn require_split(&self, split: Split) -> Result<Vec<&ImageRecord>> {
        let v: Vec<_> = self.split(split).collect();
        if v.is_empty() {
            return Err(Error::Contract(format!("{split} split is empty")));
        }
        Ok(v)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.class_counts[&split][&label]
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }
}

/// Parse and validate a manifest CSV.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let schema = |row: usize, message: String| Error::Schema { path: path.to_path_buf(), row, message };

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema(0, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let with_dims = if header == BASE_HEADER {
        false
    } else if header.len() == 6 && header[..4] == BASE_HEADER && header[4..] == DIM_HEADER {
        true
    } else {
        return Err(schema(0, format!("bad header {header:?}; expected {}", BASE_HEADER.join(","))));
    };

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| schema(row_no, e.to_string()))?;
        if row.len() != header.len() {
            return Err(schema(row_no, format!("expected {} fields, got {}", header.len(), row.len())));
        }
        let image_id = row[0].trim().to_string();
        if image_id.is_empty() {
            return Err(schema(row_no, "empty image_id".into()));
        }
        let label = row[2].parse::<Label>().map_err(|m| schema(row_no, m))?;
        let split = row[3].parse::<Split>().map_err(|m| schema(row_no, m))?;
        let (width_px, height_px) = if with_dims {
            let parse = |s: &str| -> std::result::Result<u32, String> {
                match s.trim().parse::<u32>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err(format!("dimension {s:?} is not a positive integer")),
                }
            };
            (
                Some(parse(&row[4]).map_err(|m| schema(row_no, m))?),
                Some(parse(&row[5]).map_err(|m| schema(row_no, m))?),
            )
        } else {
            (None, None)
        };
        records.push(ImageRecord {
            image_id,
            file_path: PathBuf::from(row[1].trim()),
            label,
            split,
            width_px,
            height_px,
        });
    }

    let mut manifest = DatasetManifest::new(&base_dir, records).map_err(|e| match e {
        Error::Schema { row, message, .. } => schema(row, message),
        other => other,
    })?;
    manifest.has_dimension_columns = with_dims;
    Ok(manifest)
}

/// Serialize a manifest in canonical form: rows sorted by image_id, labels
/// upper-case, splits lower-case.
pub fn manifest_to_csv(manifest: &DatasetManifest) -> String {
    let mut rows: Vec<&ImageRecord> = manifest.records.iter().collect();
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header: Vec<&str> = BASE_HEADER.to_vec();
    if manifest.has_dimension_columns {
        header.extend(DIM_HEADER);
    }
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let path = r.file_path.to_string_lossy();
        let mut fields = vec![r.image_id.clone(), path.into_owned(), r.label.to_string(), r.split.to_string()];
        if manifest.has_dimension_columns {
            fields.push(r.width_px.unwrap_or(0).to_string());
            fields.push(r.height_px.unwrap_or(0).to_string());
        }
        w.write_record(&fields).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 input yields utf-8 output")
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest_to_csv(manifest)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub records: usize,
    /// (image_id, reason)
    pub unreadable: Vec<(String, String)>,
    /// (image_id, channel count)
    pub non_rgb: Vec<(String, u8)>,
    /// (image_id, declared (w, h), decoded (w, h))
    pub dimension_mismatches: Vec<(String, (u32, u32), (u32, u32))>,
    pub class_counts: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Decode every referenced image and collect problems. Never fails.
pub fn verify_dataset(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport { records: manifest.records.len(), ..Default::default() };
    for r in &manifest.records {
        let path = manifest.resolve(r);
        let img = match image::ImageReader::open(&path)
            .map_err(|e| e.to_string())
            .and_then(|rd| rd.with_guessed_format().map_err(|e| e.to_string()))
            .and_then(|rd| rd.decode().map_err(|e| e.to_string()))
        {
            Ok(img) => img,
            Err(reason) => {
                report.unreadable.push((r.image_id.clone(), reason));
                continue;
            }
        };
        let channels = img.color().channel_count();
        if channels != 3 {
            report.non_rgb.push((r.image_id.clone(), channels));
        }
        if let (Some(w), Some(h)) = (r.width_px, r.height_px) {
            let actual = (img.width(), img.height());
            if (w, h) != actual {
                report.dimension_mismatches.push((r.image_id.clone(), (w, h), actual));
            }
        }
    }
    report.class_counts = manifest
        .class_counts
        .iter()
        .map(|(s, m)| (s.to_string(), m.iter().map(|(l, c)| (l.to_string(), *c)).collect()))
        .collect();
    report.ok = report.unreadable.is_empty() && report.non_rgb.is_empty() && report.dimension_mismatches.is_empty();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn png(dir: &Path, name: &str, w: u32, h: u32) {
        RgbImage::from_pixel(w, h, Rgb([10, 20, 30])).save(dir.join(name)).unwrap();
    }

    #[test]
    fn one_row_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "image_id,file_path,label,split\na,a.png,MM,train\nb,b.png,sk,train\nc,c.png,Bn,train\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.count(Split::Train, Label::Mm), 1);
        assert_eq!(m.count(Split::Train, Label::Sk), 1);
        assert_eq!(m.count(Split::Train, Label::Bn), 1);
        assert_eq!(m.count(Split::Test, Label::Mm), 0);
    }

    #[test]
    fn empty_body() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "image_id,file_path,label,split\n");
        let m = load_manifest(&p).unwrap();
        assert!(m.records.is_empty());
        assert!(m.class_counts.values().flat_map(|c| c.values()).all(|&c| c == 0));
        assert!(m.require_split(Split::Train).is_err());
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path().join("nope.csv")), Err(Error::Io { .. })));

        let p = write(dir.path(), "bad.csv", "image_id,file_path,label,split\na,a.png,MM,train\nb,b.png,XX,test\n");
        match load_manifest(&p) {
            Err(Error::Schema { row, message, .. }) => {
                assert_eq!(row, 2);
                assert!(message.contains("XX"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }

        let p = write(dir.path(), "dup.csv", "image_id,file_path,label,split\na,a.png,MM,train\na,b.png,SK,test\n");
        match load_manifest(&p) {
            Err(Error::Schema { row, message, .. }) => {
                assert_eq!(row, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }

        let p = write(dir.path(), "hdr.csv", "id,path,label,split\n");
        assert!(matches!(load_manifest(&p), Err(Error::Schema { row: 0, .. })));
    }

    #[test]
    fn verify_reports_problems() {
        let dir = tempfile::tempdir().unwrap();
        png(dir.path(), "a.png", 8, 6);
        png(dir.path(), "b.png", 5, 5);
        image::GrayImage::new(4, 4).save(dir.path().join("g.png")).unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "image_id,file_path,label,split\na,a.png,MM,train\nb,b.png,SK,test\n",
        );
        let m = load_manifest(&p).unwrap();
        let rep = verify_dataset(&m);
        assert!(rep.ok, "{rep:?}");

        std::fs::remove_file(dir.path().join("b.png")).unwrap();
        let rep = verify_dataset(&m);
        assert!(!rep.ok);
        assert_eq!(rep.unreadable.len(), 1);
        assert_eq!(rep.unreadable[0].0, "b");

        let p = write(
            dir.path(),
            "m2.csv",
            "image_id,file_path,label,split,width_px,height_px\na,a.png,MM,train,8,7\ng,g.png,BN,test,4,4\n",
        );
        let rep = verify_dataset(&load_manifest(&p).unwrap());
        assert_eq!(rep.dimension_mismatches, vec![("a".to_string(), (8, 7), (8, 6))]);
        assert_eq!(rep.non_rgb, vec![("g".to_string(), 1)]);
        assert!(!rep.ok);
    }

    fn arb_record() -> impl Strategy<Value = (String, u8, bool, Option<(u32, u32)>)> {
        ("[a-z0-9_]{1,8}", 0u8..3, any::<bool>(), proptest::option::of((1u32..5000, 1u32..5000)))
    }

    proptest! {
        #[test]
        fn canonical_roundtrip(rows in proptest::collection::vec(arb_record(), 0..20), dims in any::<bool>()) {
            let mut seen = BTreeSet::new();
            let records: Vec<ImageRecord> = rows
                .into_iter()
                .filter(|r| seen.insert(r.0.clone()))
                .map(|(id, l, t, d)| {
                    let d = if dims { Some(d.unwrap_or((3, 4))) } else { None };
                    ImageRecord {
                        file_path: PathBuf::from(format!("img/{id}.png")),
                        image_id: id,
                        label: Label::from_index(l as usize).unwrap(),
                        split: if t { Split::Train } else { Split::Test },
                        width_px: d.map(|x| x.0),
                        height_px: d.map(|x| x.1),
                    }
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let m = DatasetManifest::new(dir.path(), records).unwrap();
            let p = dir.path().join("m.csv");
            write_manifest(&m, &p).unwrap();
            let first = std::fs::read(&p).unwrap();
            let loaded = load_manifest(&p).unwrap();
            let per_split: usize = loaded.class_counts.values().flat_map(|c| c.values()).sum();
            prop_assert_eq!(per_split, loaded.records.len());
            write_manifest(&loaded, &p).unwrap();
            prop_assert_eq!(first, std::fs::read(&p).unwrap());
        }
    }
}
