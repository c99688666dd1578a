//! Result tables assembled from per-table evaluation reports.

use std::collections::BTreeMap;

use dermres_core::evaluator::{comparison_report, AucRow, AucTable, ComparisonTable};
use dermres_core::fusion::{level1_id, level2_id, single_resolution_id, FusionGraph, LEVEL3_ID};
use dermres_core::{Architecture, Cell, EvalReport, MatrixAxes, OptimizerKind, Resolution};
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSet {
    pub per_optimiser: Option<AucTable>,
    pub by_input_size: AucTable,
    pub multi_resolution: Option<AucTable>,
    pub single_resolution: AucTable,
    pub comparison: Option<ComparisonTable>,
}

impl ReportSet {
    pub fn render_text(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = &self.per_optimiser {
            parts.push(t.render_text());
        }
        parts.push(self.by_input_size.render_text());
        if let Some(t) = &self.multi_resolution {
            parts.push(t.render_text());
        }
        parts.push(self.single_resolution.render_text());
        if let Some(t) = &self.comparison {
            parts.push(t.render_text());
        }
        parts.join("\n")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report set serializes") + "\n"
    }
}

fn size_label(r: Resolution) -> String {
    format!("{r}x{r}")
}

fn get<'a>(reports: &'a BTreeMap<String, EvalReport>, id: &str) -> Result<&'a EvalReport> {
    reports.get(id).ok_or_else(|| CliError::prerequisite("evaluate", format!("no evaluation report for {id}")))
}

/// Mean of per-run AUCs over the repeats of one (architecture, resolution,
/// optimiser).
fn optimiser_mean(
    axes: &MatrixAxes,
    architecture: Architecture,
    resolution: Resolution,
    optimizer: OptimizerKind,
    reports: &BTreeMap<String, EvalReport>,
) -> Result<AucRow> {
    let mut sums = [0.0; 3];
    for &repeat in &axes.repeats {
        let r = get(reports, &Cell { architecture, resolution, optimizer, repeat }.run_id())?;
        sums[0] += r.auc_mm;
        sums[1] += r.auc_sk;
        sums[2] += r.auc_avg;
    }
    let n = axes.repeats.len() as f64;
    Ok(AucRow {
        first: format!("{} mean", optimizer.display_name()),
        second: architecture.display_name().into(),
        mm: sums[0] / n,
        sk: sums[1] / n,
        avg: sums[2] / n,
    })
}

/// All tables the plan supports. Tables that need resolutions of 128 px
/// or more are omitted when the plan has none.
pub fn build_reports(graph: &FusionGraph, reports: &BTreeMap<String, EvalReport>, approach: &str) -> Result<ReportSet> {
    let axes = &graph.axes;
    let first_multi = axes.resolutions.iter().copied().find(|r| r.in_multi_resolution_fusion());

    let per_optimiser = match first_multi {
        None => None,
        Some(r) => {
            let caption = format!(
                "Level 1 fusion at {}, AUC [%]; optimiser rows average {} repeat(s)",
                size_label(r),
                axes.repeats.len()
            );
            let mut t = AucTable::new(caption, "optimiser", "network");
            for &a in &axes.architectures {
                let mut rows = Vec::new();
                for &o in &axes.optimizers {
                    rows.push(optimiser_mean(axes, a, r, o, reports)?);
                }
                t.push_group(rows);
                t.push_group(vec![AucRow::from_report("average over optimisers", a.display_name(), get(reports, &level1_id(a, r))?)]);
            }
            Some(t)
        }
    };

    let mut by_input_size = AucTable::new("Level 1 fusion by input size, AUC [%]", "network", "input size");
    for &r in &axes.resolutions {
        let mut rows = Vec::new();
        for &a in &axes.architectures {
            rows.push(AucRow::from_report(a.display_name(), size_label(r), get(reports, &level1_id(a, r))?));
        }
        by_input_size.push_group(rows);
    }

    let multi_resolution = match first_multi {
        None => None,
        Some(_) => {
            let mut t = AucTable::new("Level 2 and level 3 fusion, AUC [%]", "network", "input size");
            let mut rows = Vec::new();
            for &a in &axes.architectures {
                rows.push(AucRow::from_report(format!("{} (level 2)", a.display_name()), "all sizes", get(reports, &level2_id(a))?));
            }
            t.push_group(rows);
            t.push_group(vec![AucRow::from_report("level 3 fusion", "all sizes", get(reports, LEVEL3_ID)?)]);
            Some(t)
        }
    };

    let mut single_resolution = AucTable::new("Fusion of all networks at one input size, AUC [%]", "network", "input size");
    let mut rows = Vec::new();
    for &r in &axes.resolutions {
        rows.push(AucRow::from_report("fusion of all nets", size_label(r), get(reports, &single_resolution_id(r))?));
    }
    single_resolution.push_group(rows);
    if first_multi.is_some() {
        single_resolution.push_group(vec![AucRow::from_report("three-level fusion", "all sizes", get(reports, LEVEL3_ID)?)]);
    }

    let comparison = match first_multi {
        None => None,
        Some(_) => Some(comparison_report(get(reports, LEVEL3_ID)?, approach, "multiple")),
    };

    Ok(ReportSet { per_optimiser, by_input_size, multi_resolution, single_resolution, comparison })
}
