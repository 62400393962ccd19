//! Report and table writers.
//!
//! Wall-clock timings differ between runs, so they go to a `.timing`
//! sidecar next to each report; the report itself is a pure function of the
//! inputs and seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use carsac_core::engine::{EstimationResult, TimingBreakdown};
use carsac_core::evaluation::MetricReport;
use carsac_core::geometry::RelativePose;

pub const REPORT_MAGIC: &str = "carsac-report 1";

pub fn timing_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".timing");
    PathBuf::from(s)
}

fn push_values(out: &mut String, key: &str, values: impl IntoIterator<Item = f64>) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

pub struct EstimateReport<'a> {
    pub method: &'a str,
    pub result: &'a EstimationResult,
    pub pose: Option<&'a RelativePose>,
    pub pose_error_deg: Option<f64>,
}

impl EstimateReport<'_> {
    pub fn to_text(&self) -> String {
        let r = self.result;
        let m = &r.model;
        let mut out = format!("{REPORT_MAGIC}\nmethod {}\nmodel_kind {}\n", self.method, m.kind.name());
        push_values(&mut out, "model", m.m.transpose().iter().copied());
        push_values(&mut out, "threshold", [r.threshold]);
        if let Some(p) = self.pose {
            push_values(&mut out, "pose_R", p.rotation.transpose().iter().copied());
            push_values(&mut out, "pose_t", p.translation.iter().copied());
        }
        if let Some(e) = self.pose_error_deg {
            push_values(&mut out, "pose_error_deg", [e]);
        }
        push_values(&mut out, "batch_best_scores", r.per_batch_best_score.iter().copied());
        let inliers = r.inlier_probs.iter().filter(|&&p| p > 0.5).count();
        let _ = writeln!(out, "inliers {inliers} of {}", r.inlier_probs.len());
        out.push_str("inlier_probs\n");
        for p in &r.inlier_probs {
            let _ = writeln!(out, "{p:?}");
        }
        out
    }
}

/// Per-component nanoseconds and shares of the total.
pub fn timing_text(t: &TimingBreakdown) -> String {
    let total = t.total.max(1) as f64;
    let mut out = String::from("component ns share\n");
    for (name, ns) in TimingBreakdown::COMPONENTS.iter().zip(t.components()) {
        let _ = writeln!(out, "{name} {ns} {:.4}", ns as f64 / total);
    }
    let _ = writeln!(out, "total {} 1.0000", t.total);
    let _ = writeln!(out, "learned {} {:.4}", t.learned(), t.learned() as f64 / total);
    out
}

/// Aligned comparison table. `with_timing` appends the learned share,
/// which is not reproducible across runs.
pub fn bench_table(reports: &[MetricReport], with_timing: bool) -> String {
    let mut header = vec!["method", "AUC5", "AUC1", "MAP20", "Med", "Avg", "Fail"];
    if with_timing {
        header.push("Learned%");
    }
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        let mut row = vec![
            r.method.name().to_string(),
            format!("{:.2}", r.auc5),
            format!("{:.2}", r.auc1),
            format!("{:.2}", r.map20),
            format!("{:.3}", r.median_deg),
            format!("{:.3}", r.avg_deg),
            r.failures.to_string(),
        ];
        if with_timing {
            row.push(format!("{:.1}", 100.0 * r.learned_share()));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Per-method timing breakdowns for the bench sidecar.
pub fn bench_timing_text(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "[{}]", r.method.name());
        out.push_str(&timing_text(&r.timing));
    }
    out
}
