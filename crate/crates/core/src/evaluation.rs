//! Classification metrics over predictions: accuracy, support-weighted
//! precision/recall/F1, per-class scores and the confusion matrix, plus
//! side-by-side comparison tables.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::llm::Prediction;
use crate::trip_data::{LabelTable, TripMode, NUM_MODES};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to score")]
    Empty,
    #[error("prediction for {0} has no ground truth")]
    UnknownId(u64),
    #[error("more than one prediction for {0}")]
    Duplicate(u64),
    #[error("comparison needs at least one report")]
    NoReports,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub mode: TripMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of the class.
    pub support: u64,
    /// Instances predicted as the class.
    pub predicted: u64,
    /// Precision had an empty denominator and was set to 0.
    #[serde(default)]
    pub precision_undefined: bool,
    /// Recall had an empty denominator and was set to 0.
    #[serde(default)]
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// Canonical mode order.
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`, canonical mode order.
    pub confusion: [[u64; NUM_MODES]; NUM_MODES],
    pub fallback_count: u64,
}

impl MetricsReport {
    pub fn class(&self, mode: TripMode) -> &ClassMetrics {
        &self.per_class[mode.index()]
    }

    /// Metrics from a confusion matrix (rows true, columns predicted).
    pub fn from_confusion(confusion: [[u64; NUM_MODES]; NUM_MODES], fallback_count: u64) -> Result<Self, EvalError> {
        let n: u64 = confusion.iter().flatten().sum();
        if n == 0 {
            return Err(EvalError::Empty);
        }
        let nf = n as f64;
        let correct: u64 = (0..NUM_MODES).map(|i| confusion[i][i]).sum();
        let mut per_class = Vec::with_capacity(NUM_MODES);
        let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
        for (c, &mode) in TripMode::ALL.iter().enumerate() {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let w = support as f64 / nf;
            wp += w * precision;
            wr += w * recall;
            wf += w * f1;
            per_class.push(ClassMetrics {
                mode,
                precision,
                recall,
                f1,
                support,
                predicted,
                precision_undefined: predicted == 0,
                recall_undefined: support == 0,
            });
        }
        Ok(MetricsReport {
            n,
            accuracy: correct as f64 / nf,
            weighted_precision: wp,
            weighted_recall: wr,
            weighted_f1: wf,
            per_class,
            confusion,
            fallback_count,
        })
    }
}

/// Score predictions against ground truth. Every prediction must have a
/// truth entry and appear once; truth entries without a prediction are
/// ignored.
pub fn score(predictions: &[Prediction], truth: &LabelTable) -> Result<MetricsReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut seen = HashSet::with_capacity(predictions.len());
    let mut confusion = [[0u64; NUM_MODES]; NUM_MODES];
    let mut fallback = 0;
    for p in predictions {
        if !seen.insert(p.query_doc_id) {
            return Err(EvalError::Duplicate(p.query_doc_id));
        }
        let t = truth.get(p.query_doc_id).ok_or(EvalError::UnknownId(p.query_doc_id))?;
        confusion[t.index()][p.mode.index()] += 1;
        fallback += u64::from(p.fallback_used);
    }
    MetricsReport::from_confusion(confusion, fallback)
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub method: String,
    pub accuracy: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub n: u64,
    pub fallback_count: u64,
}

/// Per-column flags marking the best value (ties all flagged).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BestFlags {
    pub accuracy: bool,
    pub f1: bool,
    pub recall: bool,
    pub precision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub best: Vec<BestFlags>,
}

/// Tabulate named reports, one row per `(model, method, report)`.
pub fn compare(reports: &[(String, String, MetricsReport)]) -> Result<ComparisonTable, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|(model, method, r)| ComparisonRow {
            model: model.clone(),
            method: method.clone(),
            accuracy: r.accuracy,
            f1: r.weighted_f1,
            recall: r.weighted_recall,
            precision: r.weighted_precision,
            n: r.n,
            fallback_count: r.fallback_count,
        })
        .collect();
    Ok(ComparisonTable::from_rows(rows))
}

impl ComparisonTable {
    pub fn from_rows(rows: Vec<ComparisonRow>) -> Self {
        let max = |f: fn(&ComparisonRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let (a, f, r, p) = (max(|x| x.accuracy), max(|x| x.f1), max(|x| x.recall), max(|x| x.precision));
        let best = rows
            .iter()
            .map(|x| BestFlags {
                accuracy: x.accuracy == a,
                f1: x.f1 == f,
                recall: x.recall == r,
                precision: x.precision == p,
            })
            .collect();
        ComparisonTable { rows, best }
    }

    /// Aligned plain-text table, metrics to three decimals, best values
    /// marked with `*`.
    pub fn to_text(&self) -> String {
        let cell = |v: f64, best: bool| format!("{v:.3}{}", if best { "*" } else { " " });
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .zip(&self.best)
            .map(|(r, b)| {
                [
                    r.model.clone(),
                    r.method.clone(),
                    cell(r.accuracy, b.accuracy),
                    cell(r.f1, b.f1),
                    cell(r.recall, b.recall),
                    cell(r.precision, b.precision),
                    r.n.to_string(),
                    r.fallback_count.to_string(),
                ]
            })
            .collect();
        let titles = ["Model", "Method", "Accuracy", "F1", "Recall", "Precision", "N", "Fallbacks"];
        let mut widths = titles.map(str::len);
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[&str]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                if i < 2 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "{c:>w$}");
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&titles);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule.iter().map(String::as_str).collect::<Vec<_>>());
        for row in &body {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    /// CSV with full-precision metrics.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<Result<Vec<ComparisonRow>, _>>()?;
        Ok(ComparisonTable::from_rows(rows))
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
