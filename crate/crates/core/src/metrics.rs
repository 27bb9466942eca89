//! Confusion matrices and the per-class metrics derived from them.

use serde::{Deserialize, Serialize};

use crate::train::EpochRecord;

/// `K x K` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Self {
        assert!(rows.iter().all(|r| r.len() == rows.len()), "confusion matrix must be square");
        Self { counts: rows }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::new(classes);
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    /// `true\pred` header row followed by one row per true class.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = String::from("true\\pred");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (k, row) in self.counts.iter().enumerate() {
            out.push_str(names.get(k).copied().unwrap_or("?"));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fractional_incorrect: f64,
    /// Set when no sample was predicted as this class (precision reported as 0).
    pub precision_undefined: bool,
    /// Set when the class has no true samples (recall reported as 0).
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Accuracy and per-class precision/recall/F1. Returns `None` for an empty
/// matrix.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Option<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return None;
    }
    let per_class = (0..cm.classes())
        .map(|k| {
            let tp = cm.counts[k][k];
            let (precision, precision_undefined) = ratio(tp, cm.col_sum(k));
            let (recall, recall_undefined) = ratio(tp, cm.row_sum(k));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                fractional_incorrect: if recall_undefined { 0.0 } else { 1.0 - recall },
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    Some(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
        confusion: cm.clone(),
        history: Vec::new(),
    })
}

/// Per-class error rate `1 - recall`.
pub fn fractional_incorrect(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes())
        .map(|k| {
            let (recall, undefined) = ratio(cm.counts[k][k], cm.row_sum(k));
            if undefined {
                0.0
            } else {
                1.0 - recall
            }
        })
        .collect()
}

/// Index of the largest probability; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
