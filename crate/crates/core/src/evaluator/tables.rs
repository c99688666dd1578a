//! Text and JSON table layouts for AUC results.

use serde::{Deserialize, Serialize};

use super::EvalReport;

/// Published AUC scores [%] on the same test split: approach, input size,
/// MM, SK, average. Stored verbatim, never recomputed.
pub const PUBLISHED_BASELINES: [[&str; 5]; 8] = [
    ["Matsunaga et al.", "n/a", "86.8", "95.3", "91.1"],
    ["Gonzalez-Diaz", "256x256", "85.6", "96.5", "91.0"],
    ["Menegola et al.", "128x128", "87.4", "94.3", "90.8"],
    ["inter-network fusion (2019)", "224x224", "87.3", "95.5", "91.4"],
    ["Zhang et al.", "224x224", "87.5", "95.8", "91.7"],
    ["Yan et al.", "256x256", "88.3", "n/a", "n/a"],
    ["Guo et al.", "224x224", "87.4", "95.9", "91.7"],
    ["three-level fusion (published)", "multiple", "89.2", "96.6", "92.9"],
];

/// Group boundaries of the published rows: challenge entries, later
/// methods, and the reference fusion result.
const BASELINE_GROUPS: [usize; 3] = [3, 7, 8];

fn percent(auc: f64) -> String {
    format!("{:.2}", auc * 100.0)
}

fn render(header: &[&str], groups: &[Vec<Vec<String>>]) -> String {
    let ncol = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in groups.iter().flatten() {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let total = width.iter().sum::<usize>() + 2 * (ncol - 1);
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < 2 {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("{c:>w$}"));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = "=".repeat(total) + "\n";
    out += &line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out += &("=".repeat(total) + "\n");
    for (g, rows) in groups.iter().enumerate() {
        if g > 0 {
            out += &("-".repeat(total) + "\n");
        }
        for r in rows {
            out += &line(r);
        }
    }
    out + &"=".repeat(total) + "\n"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub first: String,
    pub second: String,
    pub mm: f64,
    pub sk: f64,
    pub avg: f64,
}

impl AucRow {
    pub fn from_report(first: impl Into<String>, second: impl Into<String>, report: &EvalReport) -> Self {
        Self { first: first.into(), second: second.into(), mm: report.auc_mm, sk: report.auc_sk, avg: report.auc_avg }
    }

    fn cells(&self) -> Vec<String> {
        vec![self.first.clone(), self.second.clone(), percent(self.mm), percent(self.sk), percent(self.avg)]
    }
}

/// Rows grouped into horizontal-rule separated blocks, values rendered as
/// percentages with two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    pub caption: String,
    pub columns: [String; 2],
    pub groups: Vec<Vec<AucRow>>,
}

impl AucTable {
    pub fn new(caption: impl Into<String>, first: &str, second: &str) -> Self {
        Self { caption: caption.into(), columns: [first.into(), second.into()], groups: Vec::new() }
    }

    pub fn push_group(&mut self, rows: Vec<AucRow>) {
        if !rows.is_empty() {
            self.groups.push(rows);
        }
    }

    pub fn render_text(&self) -> String {
        let header = [self.columns[0].as_str(), self.columns[1].as_str(), "MM", "SK", "avg."];
        let groups: Vec<Vec<Vec<String>>> = self.groups.iter().map(|g| g.iter().map(AucRow::cells).collect()).collect();
        format!("{}\n{}", self.caption, render(&header, &groups))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub approach: String,
    pub input_size: String,
    pub mm: String,
    pub sk: String,
    pub avg: String,
}

impl ComparisonRow {
    fn cells(&self) -> Vec<String> {
        vec![self.approach.clone(), self.input_size.clone(), self.mm.clone(), self.sk.clone(), self.avg.clone()]
    }

    /// Numeric `(mm, sk, avg)`; `n/a` cells are `None`.
    pub fn values(&self) -> [Option<f64>; 3] {
        [&self.mm, &self.sk, &self.avg].map(|c| c.parse().ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baselines: Vec<ComparisonRow>,
    pub ours: ComparisonRow,
}

impl ComparisonTable {
    pub fn render_text(&self) -> String {
        let header = ["approach", "input size", "MM", "SK", "avg."];
        let mut groups = Vec::new();
        let mut start = 0;
        for end in BASELINE_GROUPS {
            groups.push(self.baselines[start..end].iter().map(ComparisonRow::cells).collect());
            start = end;
        }
        groups.push(vec![self.ours.cells()]);
        format!("AUC [%] against published results\n{}", render(&header, &groups))
    }

    /// Column means over rows with a value, skipping `n/a`.
    pub fn column_means(&self) -> [Option<f64>; 3] {
        let mut out = [None; 3];
        for (k, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = self.baselines.iter().chain([&self.ours]).filter_map(|r| r.values()[k]).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }
}

/// Published rows followed by `report` rendered with two decimals.
pub fn comparison_report(report: &EvalReport, approach: &str, input_size: &str) -> ComparisonTable {
    let baselines = PUBLISHED_BASELINES
        .iter()
        .map(|r| ComparisonRow {
            approach: r[0].into(),
            input_size: r[1].into(),
            mm: r[2].into(),
            sk: r[3].into(),
            avg: r[4].into(),
        })
        .collect();
    let ours = ComparisonRow {
        approach: approach.into(),
        input_size: input_size.into(),
        mm: percent(report.auc_mm),
        sk: percent(report.auc_sk),
        avg: percent(report.auc_avg),
    };
    ComparisonTable { baselines, ours }
}
