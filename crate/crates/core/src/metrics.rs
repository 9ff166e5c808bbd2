//! Confusion matrices, WAR / UAR / Macro-F1 and their file forms.
//!
//! Conventions: classes without support are left out of the UAR and
//! Macro-F1 means; precision of a never-predicted class is 0; F1 is 0 when
//! precision and recall are both 0.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{CrabError, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    /// Square, non-empty.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let e = counts.len();
        if e == 0 || counts.iter().any(|r| r.len() != e) {
            return Err(CrabError::dim("confusion", format!("matrix must be square and non-empty, got {e} rows")));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(CrabError::dim("confusion", format!("{} labels vs {} predictions", labels.len(), predictions.len())));
    }
    if num_classes == 0 {
        return Err(CrabError::Config("confusion matrix needs at least one class".into()));
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (i, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
        if y >= num_classes || p >= num_classes {
            return Err(CrabError::Contract(format!("sample {i}: label {y} / prediction {p} outside 0..{num_classes}")));
        }
        cm.counts[y][p] += 1;
    }
    Ok(cm)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(values: &[f64], num_classes: usize) -> Vec<usize> {
    values
        .chunks(num_classes)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub war: f64,
    pub uar: f64,
    pub macro_f1: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
}

impl MetricReport {
    /// Smallest recall over supported classes.
    pub fn min_recall(&self) -> f64 {
        self.recall.iter().zip(&self.support).filter(|(_, &s)| s > 0).map(|(&r, _)| r).fold(f64::INFINITY, f64::min)
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(CrabError::Degenerate {
            op: "report",
            detail: "confusion matrix holds no samples".into(),
        });
    }
    let e = cm.num_classes();
    let support: Vec<u64> = (0..e).map(|c| cm.row_sum(c)).collect();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let recall: Vec<f64> = (0..e).map(|c| ratio(cm.counts[c][c], support[c])).collect();
    let precision: Vec<f64> = (0..e).map(|c| ratio(cm.counts[c][c], cm.col_sum(c))).collect();
    let f1: Vec<f64> = recall
        .iter()
        .zip(&precision)
        .map(|(&r, &p)| if r + p == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect();
    let supported: Vec<usize> = (0..e).filter(|&c| support[c] > 0).collect();
    let mean = |v: &[f64]| supported.iter().map(|&c| v[c]).sum::<f64>() / supported.len() as f64;
    Ok(MetricReport {
        war: cm.trace() as f64 / total as f64,
        uar: mean(&recall),
        macro_f1: mean(&f1),
        recall,
        precision,
        f1,
        support,
    })
}

/// Layout of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub classes: Vec<String>,
    #[serde(flatten)]
    pub report: MetricReport,
    pub confusion: Vec<Vec<u64>>,
}

pub const METRICS_JSON: &str = "metrics.json";
pub const CONFUSION_CSV: &str = "confusion.csv";

/// CSV with a `true\pred` corner cell, one column per predicted class and
/// one row per true class.
pub fn confusion_csv(cm: &ConfusionMatrix, labels: &LabelMap) -> Result<String> {
    if labels.len() != cm.num_classes() {
        return Err(CrabError::dim("emit_report", format!("{} labels for {} classes", labels.len(), cm.num_classes())));
    }
    let mut out = String::from("true\\pred");
    for l in labels.labels() {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (l, row) in labels.labels().iter().zip(&cm.counts) {
        out.push_str(l);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses the CSV written by [`confusion_csv`].
pub fn parse_confusion_csv(text: &str) -> Result<(Vec<String>, ConfusionMatrix)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CrabError::Data("empty confusion CSV".into()))?;
    let classes: Vec<String> = header.split(',').skip(1).map(String::from).collect();
    let counts = lines
        .map(|line| {
            line.split(',')
                .skip(1)
                .map(|v| v.parse::<u64>().map_err(|e| CrabError::Data(format!("bad count {v:?}: {e}"))))
                .collect::<Result<Vec<u64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((classes, ConfusionMatrix::from_counts(counts)?))
}

/// Writes `metrics.json` and `confusion.csv` into `dir`.
pub fn emit_report(report: &MetricReport, cm: &ConfusionMatrix, labels: &LabelMap, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CrabError::io(dir, e))?;
    let csv = confusion_csv(cm, labels)?;
    let file = MetricsFile {
        classes: labels.labels().to_vec(),
        report: report.clone(),
        confusion: cm.counts.clone(),
    };
    let json_path = dir.join(METRICS_JSON);
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| CrabError::io(&json_path, e))?;
    let csv_path = dir.join(CONFUSION_CSV);
    fs::write(&csv_path, csv).map_err(|e| CrabError::io(&csv_path, e))
}
