//! Confusion matrices, per-class precision/recall/F1, overall accuracy and
//! report files.
//!
//! Any ratio with a zero denominator is reported as 0, and the mean F1 runs
//! over every configured class whether or not it occurs in the data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    /// Row-major `[C, C]`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let c = rows.len();
        assert!(rows.iter().all(|r| r.len() == c), "confusion matrix must be square");
        ConfusionMatrix { n_classes: c, counts: rows.concat() }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth count of class `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(c, p)).sum()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::Metric(format!("cannot merge {} and {} classes", self.n_classes, other.n_classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

pub fn confusion(gt: &[usize], pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if gt.len() != pred.len() {
        return Err(Error::Data(format!("{} labels but {} predictions", gt.len(), pred.len())));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (i, (&g, &p)) in gt.iter().zip(pred).enumerate() {
        if g >= n_classes || p >= n_classes {
            return Err(Error::Data(format!("point {i}: class pair ({g}, {p}) outside [0, {n_classes})")));
        }
        cm.counts[g * n_classes + p] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision and recall of class `c`.
pub fn precision_recall(cm: &ConfusionMatrix, c: usize) -> (f64, f64) {
    let tp = cm.get(c, c);
    let predicted: u64 = (0..cm.n_classes).map(|g| cm.get(g, c)).sum();
    (ratio(tp, predicted), ratio(tp, cm.support(c)))
}

/// Trace over total.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metric("overall accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.n_classes).map(|c| cm.get(c, c)).sum();
    Ok(trace as f64 / total as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class F1 and their unweighted mean.
pub fn f1_scores(cm: &ConfusionMatrix) -> (Vec<f64>, f64) {
    let per: Vec<f64> = (0..cm.n_classes)
        .map(|c| {
            let (p, r) = precision_recall(cm, c);
            f1(p, r)
        })
        .collect();
    let mean = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (per, mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub overall_accuracy: f64,
    pub mean_f1: f64,
    pub total: u64,
}

impl MetricsReport {
    /// `class_names` may be empty, in which case class ids are used.
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        let (f1s, mean_f1) = f1_scores(cm);
        let classes = (0..cm.n_classes)
            .map(|c| {
                let (precision, recall) = precision_recall(cm, c);
                ClassMetrics {
                    class: class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                    precision,
                    recall,
                    f1: f1s[c],
                    count: cm.support(c),
                }
            })
            .collect();
        Ok(MetricsReport { classes, overall_accuracy: overall_accuracy(cm)?, mean_f1, total: cm.total() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

pub const REPORT_HEADER: [&str; 5] = ["class", "precision", "recall", "f1", "count"];
/// Summary rows after the classes. For single-label data the micro-averaged
/// precision, recall and F1 all equal the overall accuracy.
const OVERALL_ROW: &str = "overall";
const MEAN_ROW: &str = "mean";

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn round6(v: f64) -> f64 {
    fmt6(v).parse().expect("formatted float")
}

/// Writes the report as CSV (one row per class, then `overall` and `mean`
/// rows) or JSON, with every float at 6 decimals.
pub fn emit_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
            let mut put = |rec: [String; 5]| w.write_record(&rec).map_err(|e| Error::io(path, e.into()));
            put(REPORT_HEADER.map(String::from))?;
            for c in &report.classes {
                put([c.class.clone(), fmt6(c.precision), fmt6(c.recall), fmt6(c.f1), c.count.to_string()])?;
            }
            let oa = fmt6(report.overall_accuracy);
            put([OVERALL_ROW.into(), oa.clone(), oa.clone(), oa, report.total.to_string()])?;
            let n = report.classes.len().max(1) as f64;
            let mp = report.classes.iter().map(|c| c.precision).sum::<f64>() / n;
            let mr = report.classes.iter().map(|c| c.recall).sum::<f64>() / n;
            put([MEAN_ROW.into(), fmt6(mp), fmt6(mr), fmt6(report.mean_f1), report.total.to_string()])?;
            w.flush().map_err(io)
        }
        ReportFormat::Json => {
            let rounded = MetricsReport {
                classes: report
                    .classes
                    .iter()
                    .map(|c| ClassMetrics {
                        precision: round6(c.precision),
                        recall: round6(c.recall),
                        f1: round6(c.f1),
                        ..c.clone()
                    })
                    .collect(),
                overall_accuracy: round6(report.overall_accuracy),
                mean_f1: round6(report.mean_f1),
                total: report.total,
            };
            let text = serde_json::to_string_pretty(&rounded).expect("serializable report");
            fs::write(path, text + "\n").map_err(io)
        }
    }
}

/// Reads a report written by [`emit_report`].
pub fn read_report(path: &Path, format: ReportFormat) -> Result<MetricsReport> {
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    match format {
        ReportFormat::Json => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
        }
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
            let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
            if header.iter().ne(REPORT_HEADER) {
                return Err(bad(format!("unexpected header {header:?}")));
            }
            let mut rows = Vec::new();
            for rec in r.records() {
                let rec = rec.map_err(|e| bad(e.to_string()))?;
                let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("{:?}: {e}", &rec[i])));
                let count = rec[4].parse::<u64>().map_err(|e| bad(format!("{:?}: {e}", &rec[4])))?;
                rows.push(ClassMetrics {
                    class: rec[0].to_string(),
                    precision: num(1)?,
                    recall: num(2)?,
                    f1: num(3)?,
                    count,
                });
            }
            if rows.len() < 2 || rows[rows.len() - 2].class != OVERALL_ROW || rows[rows.len() - 1].class != MEAN_ROW {
                return Err(bad("missing summary rows".into()));
            }
            let mean = rows.pop().expect("checked");
            let overall = rows.pop().expect("checked");
            Ok(MetricsReport {
                classes: rows,
                overall_accuracy: overall.precision,
                mean_f1: mean.f1,
                total: overall.count,
            })
        }
    }
}
