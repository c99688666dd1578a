//! One-vs-all ROC analysis of ternary prediction tables.

mod plot;
mod tables;

pub use plot::{render_roc_svg, write_roc_svg};
pub use tables::{comparison_report, AucRow, AucTable, ComparisonRow, ComparisonTable, PUBLISHED_BASELINES};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::{DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_if_changed;
use crate::predictions::{PredictionTable, ProbabilityVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BinaryTask {
    #[serde(rename = "MM_vs_all")]
    MmVsAll,
    #[serde(rename = "SK_vs_all")]
    SkVsAll,
}

impl BinaryTask {
    pub const ALL: [BinaryTask; 2] = [BinaryTask::MmVsAll, BinaryTask::SkVsAll];

    pub fn positive_label(self) -> Label {
        match self {
            BinaryTask::MmVsAll => Label::Mm,
            BinaryTask::SkVsAll => Label::Sk,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BinaryTask::MmVsAll => "MM_vs_all",
            BinaryTask::SkVsAll => "SK_vs_all",
        }
    }
}

impl fmt::Display for BinaryTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Score of the task's positive class.
pub fn one_vs_all<T: Scalar>(p: &ProbabilityVector<T>, task: BinaryTask) -> T {
    p.get(task.positive_label())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false_positive_rate, true_positive_rate)`, from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
    /// Cutoff of each point; a score is positive when `>= threshold`. The
    /// first cutoff is `+inf` and is stored as the string `"inf"` in JSON.
    #[serde(with = "cutoffs")]
    pub thresholds: Vec<f64>,
}

mod cutoffs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Cutoff {
        Finite(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Cutoff> =
            v.iter().map(|&x| if x.is_finite() { Cutoff::Finite(x) } else { Cutoff::Text("inf".into()) }).collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<Cutoff>::deserialize(d)?;
        raw.into_iter()
            .map(|c| match c {
                Cutoff::Finite(x) => Ok(x),
                Cutoff::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Cutoff::Text(t) => Err(serde::de::Error::custom(format!("bad cutoff {t:?}"))),
            })
            .collect()
    }
}

/// ROC curve with one point per distinct score, and its trapezoidal area.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateTask(format!("{pos} positive and {neg} negative samples")));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }

    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok((RocCurve { points, thresholds }, auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: BinaryTask,
    pub auc: f64,
    pub curve: RocCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source_id: String,
    pub n_images: usize,
    pub auc_mm: f64,
    pub auc_sk: f64,
    pub auc_avg: f64,
    pub tasks: Vec<TaskResult>,
}

impl EvalReport {
    pub fn curve(&self, task: BinaryTask) -> &RocCurve {
        &self.tasks.iter().find(|t| t.task == task).expect("both tasks present").curve
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `<dir>/<source_id>.json`; untouched when unchanged.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = report_path(dir, &self.source_id);
        write_if_changed(&path, self.to_json().as_bytes())?;
        Ok(path)
    }

    pub fn load(dir: &Path, source_id: &str) -> Result<Self> {
        let path = report_path(dir, source_id);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

pub fn report_path(dir: &Path, source_id: &str) -> PathBuf {
    dir.join(format!("{source_id}.json"))
}

/// Test-split labels, checking that `table` covers exactly that split.
fn test_labels<T: Scalar>(table: &PredictionTable<T>, manifest: &DatasetManifest) -> Result<BTreeMap<String, Label>> {
    let labels: BTreeMap<String, Label> =
        manifest.require_split(Split::Test)?.into_iter().map(|r| (r.image_id.clone(), r.label)).collect();
    let missing: Vec<String> = labels.keys().filter(|id| !table.rows.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::Coverage {
            message: format!("table {} lacks {} test images", table.source_id, missing.len()),
            missing,
        });
    }
    let extra: Vec<&String> = table.rows.keys().filter(|id| !labels.contains_key(*id)).collect();
    if !extra.is_empty() {
        return Err(Error::Contract(format!("table {} has rows outside the test split: {extra:?}", table.source_id)));
    }
    Ok(labels)
}

/// Both one-vs-all AUCs of a table over the manifest's test split.
pub fn evaluate_table<T: Scalar>(table: &PredictionTable<T>, manifest: &DatasetManifest) -> Result<EvalReport> {
    let labels = test_labels(table, manifest)?;
    let mut tasks = Vec::new();
    for task in BinaryTask::ALL {
        let (scores, truth): (Vec<f64>, Vec<bool>) = labels
            .iter()
            .map(|(id, &l)| (one_vs_all(&table.rows[id], task).as_f64(), l == task.positive_label()))
            .unzip();
        let (curve, auc) = roc_auc(&scores, &truth)
            .map_err(|e| Error::DegenerateTask(format!("{task} on {}: {e}", table.source_id)))?;
        tasks.push(TaskResult { task, auc, curve });
    }
    let (auc_mm, auc_sk) = (tasks[0].auc, tasks[1].auc);
    Ok(EvalReport { source_id: table.source_id.clone(), n_images: labels.len(), auc_mm, auc_sk, auc_avg: (auc_mm + auc_sk) / 2.0, tasks })
}

/// Most probable class; exact ties resolve in the order MM, SK, BN.
pub fn argmax_label<T: Scalar>(p: &ProbabilityVector<T>) -> Label {
    let mut best = Label::Mm;
    for l in [Label::Sk, Label::Bn] {
        if p.get(l) > p.get(best) {
            best = l;
        }
    }
    best
}

pub fn argmax_classify<T: Scalar>(table: &PredictionTable<T>) -> BTreeMap<String, Label> {
    table.rows.iter().map(|(id, p)| (id.clone(), argmax_label(p))).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplars {
    pub correct: Vec<String>,
    pub incorrect: Vec<String>,
}

/// Test ids split by whether the argmax decision agrees with the truth on
/// each binary task.
pub fn exemplar_lists<T: Scalar>(
    table: &PredictionTable<T>,
    manifest: &DatasetManifest,
) -> Result<BTreeMap<BinaryTask, Exemplars>> {
    let labels = test_labels(table, manifest)?;
    let predicted = argmax_classify(table);
    let mut out = BTreeMap::new();
    for task in BinaryTask::ALL {
        let pos = task.positive_label();
        let mut ex = Exemplars::default();
        for (id, &truth) in &labels {
            if (predicted[id] == pos) == (truth == pos) {
                ex.correct.push(id.clone());
            } else {
                ex.incorrect.push(id.clone());
            }
        }
        out.insert(task, ex);
    }
    Ok(out)
}

/// Ids present in any of `tables`, for diagnosing coverage problems.
pub fn union_ids<T: Scalar>(tables: &[&PredictionTable<T>]) -> BTreeSet<String> {
    tables.iter().flat_map(|t| t.rows.keys().cloned()).collect()
}
