//! Deterministic SVG rendering of ROC curves.

use std::fmt::Write as _;
use std::path::Path;

use super::{BinaryTask, EvalReport};
use crate::error::Result;
use crate::fsutil::write_if_changed;

const SIZE: f64 = 420.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 2] = ["#c0392b", "#2471a3"];

fn xy(fpr: f64, tpr: f64) -> (f64, f64) {
    (MARGIN + fpr * SIZE, MARGIN + (1.0 - tpr) * SIZE)
}

/// Both task curves, the chance diagonal and an AUC legend.
pub fn render_roc_svg(report: &EvalReport, title: &str) -> String {
    let full = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{full}" height="{full}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="30" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#, full / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (x, _) = xy(v, 0.0);
        let (_, y) = xy(0.0, v);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.1}</text>"#, MARGIN + SIZE + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.1}</text>"#, MARGIN - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">false positive rate</text>"#, full / 2.0, full - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {:.1})">true positive rate</text>"#, full / 2.0, full / 2.0);
    let (x0, y0) = xy(0.0, 0.0);
    let (x1, y1) = xy(1.0, 1.0);
    let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="#888888" stroke-dasharray="5,4"/>"##);

    for (k, task) in BinaryTask::ALL.iter().enumerate() {
        let pts: Vec<String> = report
            .curve(*task)
            .points
            .iter()
            .map(|&(f, t)| {
                let (x, y) = xy(f, t);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#, COLORS[k], pts.join(" "));
        let auc = if *task == BinaryTask::MmVsAll { report.auc_mm } else { report.auc_sk };
        let ly = MARGIN + SIZE - 40.0 + 18.0 * k as f64;
        let lx = MARGIN + SIZE - 190.0;
        let _ = writeln!(s, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"/>"#, lx + 20.0, COLORS[k]);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{} (AUC {:.4})</text>"#,
            lx + 26.0,
            ly + 4.0,
            task.as_str().replace('_', " "),
            auc
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write the plot; returns whether the file changed.
pub fn write_roc_svg(report: &EvalReport, title: &str, path: &Path) -> Result<bool> {
    write_if_changed(path, render_roc_svg(report, title).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::super::{roc_auc, TaskResult};
    use super::*;

    fn report(scores: &[f64], labels: &[bool]) -> EvalReport {
        let (c, a) = roc_auc(scores, labels).unwrap();
        EvalReport {
            source_id: "x".into(),
            n_images: scores.len(),
            auc_mm: a,
            auc_sk: a,
            auc_avg: a,
            tasks: vec![
                TaskResult { task: BinaryTask::MmVsAll, auc: a, curve: c.clone() },
                TaskResult { task: BinaryTask::SkVsAll, auc: a, curve: c },
            ],
        }
    }

    #[test]
    fn perfect_curve_passes_top_left_and_rerender_identical() {
        let r = report(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]);
        assert!(r.curve(BinaryTask::MmVsAll).points.contains(&(0.0, 1.0)));
        let a = render_roc_svg(&r, "ROC <L3>");
        let (x, y) = xy(0.0, 1.0);
        assert!(a.contains(&format!("{x:.2},{y:.2}")));
        assert!(a.contains("&lt;L3&gt;"));
        assert_eq!(a, render_roc_svg(&r, "ROC <L3>"));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("roc.svg");
        assert!(write_roc_svg(&r, "t", &p).unwrap());
        assert!(!write_roc_svg(&r, "t", &p).unwrap());
    }
}
