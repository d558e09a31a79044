//! Confusion matrices and precision / recall / F1 reports.
//!
//! Rows are gold labels, columns are predictions. A metric whose
//! denominator is zero is reported as 0 and still enters the macro mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{PredictError, Predictor};
use crate::corpus::{DatasetSplit, LabelSchema};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("nothing to score")]
    Empty,
    #[error("label code {code} invalid for a {num_labels}-label schema")]
    InvalidCode { code: u32, num_labels: usize },
    #[error("example {index} has no gold label")]
    Unlabeled { index: usize },
    #[error("schema mismatch between predictor and split")]
    SchemaMismatch,
    #[error(transparent)]
    Predict(#[from] PredictError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub schema: LabelSchema,
    /// `counts[gold][pred]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, gold: usize) -> u64 {
        self.counts[gold].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        self.counts.iter().map(|r| r[pred]).sum()
    }

    /// CSV with label names as header row and first column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for l in self.schema.labels() {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.schema.labels().iter().zip(&self.counts) {
            out.push_str(label);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(gold: &[u32], pred: &[u32], schema: &LabelSchema) -> Result<ConfusionMatrix, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = schema.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        for code in [g, p] {
            if !schema.contains(code) {
                return Err(MetricsError::InvalidCode { code, num_labels: k });
            }
        }
        counts[g as usize][p as usize] += 1;
    }
    Ok(ConfusionMatrix {
        schema: schema.clone(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Equal to accuracy for single-label classification.
    pub micro_f1: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let k = cm.counts.len();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            ClassMetrics {
                label: cm.schema.labels()[c].clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: cm.row_sum(c),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        micro_f1: ratio(cm.trace(), total),
        total,
        per_class,
    })
}

/// Scores any predictor (single model or ensemble) on a labeled split.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    split: &DatasetSplit,
) -> Result<(ConfusionMatrix, MetricsReport), MetricsError> {
    if predictor.schema() != &split.schema {
        return Err(MetricsError::SchemaMismatch);
    }
    let gold: Vec<u32> = split
        .examples
        .iter()
        .enumerate()
        .map(|(index, e)| e.label.ok_or(MetricsError::Unlabeled { index }))
        .collect::<Result<_, _>>()?;
    let pred: Vec<u32> = split
        .texts()
        .map(|t| predictor.predict_label(t))
        .collect::<Result<_, _>>()?;
    let cm = confusion(&gold, &pred, &split.schema)?;
    let rep = report(&cm)?;
    Ok((cm, rep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    #[default]
    MacroF1,
    MicroF1,
}

impl RankKey {
    pub fn of(self, r: &MetricsReport) -> f64 {
        match self {
            RankKey::MacroF1 => r.macro_f1,
            RankKey::MicroF1 => r.micro_f1,
        }
    }
}

/// Names sorted by descending key, ties by name.
pub fn rank_models(reports: &[(String, MetricsReport)], key: RankKey) -> Vec<String> {
    let mut order: Vec<&(String, MetricsReport)> = reports.iter().collect();
    order.sort_by(|a, b| key.of(&b.1).total_cmp(&key.of(&a.1)).then_with(|| a.0.cmp(&b.0)));
    order.into_iter().map(|(n, _)| n.clone()).collect()
}

impl MetricsReport {
    /// Per-class table and aggregate F1 / Recall / Precision.
    pub fn to_table(&self, title: &str) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.label.chars().count())
            .chain(["macro avg".len(), "Class".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>9}  {:>7}",
            "Class", "F1", "Recall", "Precision", "Support"
        );
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>9.4}  {:>7}",
                c.label, c.f1, c.recall, c.precision, c.support
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>9.4}  {:>7}",
            "macro avg", self.macro_f1, self.macro_recall, self.macro_precision, self.total
        );
        let _ = writeln!(out, "{:<width$}  {:>8.4}", "micro F1", self.micro_f1);
        out
    }

    /// Flat `key=value` lines for machine consumption.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "macro_f1={:?}", self.macro_f1);
        let _ = writeln!(out, "macro_recall={:?}", self.macro_recall);
        let _ = writeln!(out, "macro_precision={:?}", self.macro_precision);
        let _ = writeln!(out, "micro_f1={:?}", self.micro_f1);
        let _ = writeln!(out, "total={}", self.total);
        for c in &self.per_class {
            let _ = writeln!(out, "class.{}.f1={:?}", c.label, c.f1);
            let _ = writeln!(out, "class.{}.recall={:?}", c.label, c.recall);
            let _ = writeln!(out, "class.{}.precision={:?}", c.label, c.precision);
            let _ = writeln!(out, "class.{}.support={}", c.label, c.support);
        }
        out
    }
}
