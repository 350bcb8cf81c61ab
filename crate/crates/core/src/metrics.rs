//! Confusion-matrix based evaluation: accuracy, one-vs-rest sensitivity,
//! specificity, precision and F1 with macro and micro aggregation, and
//! quadratic weighted kappa.
//!
//! A rate whose denominator is zero is reported as 0 and the class is
//! flagged as degenerate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let l = rows.len();
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::Validation("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes: l,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(truths: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        if truths.len() != preds.len() {
            return Err(Error::Validation(format!(
                "{} truths but {} predictions",
                truths.len(),
                preds.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truths.iter().zip(preds) {
            if t >= classes || p >= classes {
                return Err(Error::Validation(format!(
                    "grade pair ({t}, {p}) outside 0..{classes}"
                )));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Element-wise sum, i.e. the matrix of the union of two prediction sets.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<Self> {
        if self.classes != other.classes {
            return Err(Error::Validation("cannot merge matrices of different size".into()));
        }
        Ok(ConfusionMatrix {
            classes: self.classes,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }
}

/// One-vs-rest counts for a single class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// True when any of the four rates has a zero denominator.
    pub fn is_degenerate(&self) -> bool {
        self.tp + self.fn_ == 0 || self.tn + self.fp == 0 || self.tp + self.fp == 0
    }
}

pub fn binary_counts(cm: &ConfusionMatrix, class: usize) -> BinaryCounts {
    assert!(class < cm.classes(), "class {class} outside 0..{}", cm.classes());
    let tp = cm.get(class, class);
    let fn_ = cm.row_sum(class) - tp;
    let fp = cm.col_sum(class) - tp;
    BinaryCounts {
        tp,
        fp,
        tn: cm.total() - tp - fn_ - fp,
        fn_,
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Correct predictions over all predictions.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace() as f64, cm.total() as f64)
}

/// `TP / (TP + FN)`.
pub fn sensitivity(cm: &ConfusionMatrix, class: usize) -> f64 {
    let b = binary_counts(cm, class);
    ratio(b.tp as f64, (b.tp + b.fn_) as f64)
}

/// `TN / (TN + FP)`.
pub fn specificity(cm: &ConfusionMatrix, class: usize) -> f64 {
    let b = binary_counts(cm, class);
    ratio(b.tn as f64, (b.tn + b.fp) as f64)
}

/// `TP / (TP + FP)`.
pub fn precision(cm: &ConfusionMatrix, class: usize) -> f64 {
    let b = binary_counts(cm, class);
    ratio(b.tp as f64, (b.tp + b.fp) as f64)
}

/// `TP / (TP + (FN + FP) / 2)`.
pub fn f1(cm: &ConfusionMatrix, class: usize) -> f64 {
    let b = binary_counts(cm, class);
    ratio(b.tp as f64, b.tp as f64 + 0.5 * (b.fn_ + b.fp) as f64)
}

fn macro_of(cm: &ConfusionMatrix, f: fn(&ConfusionMatrix, usize) -> f64) -> f64 {
    let l = cm.classes();
    if l == 0 {
        return 0.0;
    }
    (0..l).map(|i| f(cm, i)).sum::<f64>() / l as f64
}

pub fn macro_sensitivity(cm: &ConfusionMatrix) -> f64 {
    macro_of(cm, sensitivity)
}

pub fn macro_specificity(cm: &ConfusionMatrix) -> f64 {
    macro_of(cm, specificity)
}

pub fn macro_precision(cm: &ConfusionMatrix) -> f64 {
    macro_of(cm, precision)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    macro_of(cm, f1)
}

/// `1 - sum(W O) / sum(W E)` with `W[i][j] = (i - j)^2 / (L - 1)^2`, `O` the
/// normalised matrix and `E` the outer product of its marginals. Positive
/// values mean better than chance agreement.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let l = cm.classes();
    let total = cm.total() as f64;
    if total == 0.0 || l < 2 {
        return Err(Error::UndefinedKappa("no samples or fewer than two classes".into()));
    }
    let rows: Vec<f64> = (0..l).map(|i| cm.row_sum(i) as f64 / total).collect();
    let cols: Vec<f64> = (0..l).map(|j| cm.col_sum(j) as f64 / total).collect();
    let norm = ((l - 1) * (l - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let w = ((i as f64 - j as f64).powi(2)) / norm;
            observed += w * cm.get(i, j) as f64 / total;
            expected += w * rows[i] * cols[j];
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedKappa(
            "a single grade occurs across all truths and predictions".into(),
        ));
    }
    Ok(1.0 - observed / expected)
}

/// Per-class one-vs-rest rates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    /// Some rate had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

/// Pooled counts over all classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub precision_macro: f64,
    pub sensitivity_macro: f64,
    pub specificity_macro: f64,
    /// `None` when kappa is undefined; written as 0 in the text report.
    pub kappa_qwk: Option<f64>,
    pub micro: MicroMetrics,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

#[derive(Serialize)]
struct ReportText<'a> {
    accuracy: f64,
    f1_macro: f64,
    precision_macro: f64,
    sensitivity_macro: f64,
    specificity_macro: f64,
    kappa_qwk: f64,
    confusion_matrix: Vec<Vec<u64>>,
    per_class: BTreeMap<String, &'a ClassMetrics>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let l = cm.classes();
        let per_class: Vec<ClassMetrics> = (0..l)
            .map(|i| ClassMetrics {
                support: cm.row_sum(i),
                sensitivity: sensitivity(cm, i),
                specificity: specificity(cm, i),
                precision: precision(cm, i),
                f1: f1(cm, i),
                degenerate: binary_counts(cm, i).is_degenerate(),
            })
            .collect();
        let mut pooled = BinaryCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for i in 0..l {
            let b = binary_counts(cm, i);
            pooled.tp += b.tp;
            pooled.fp += b.fp;
            pooled.tn += b.tn;
            pooled.fn_ += b.fn_;
        }
        let (tp, fp, tn, fn_) = (pooled.tp as f64, pooled.fp as f64, pooled.tn as f64, pooled.fn_ as f64);
        let kappa_qwk = match quadratic_weighted_kappa(cm) {
            Ok(k) => Some(k),
            Err(e) => {
                log::warn!("{e}; reporting kappa as 0");
                None
            }
        };
        MetricsReport {
            accuracy: accuracy(cm),
            f1_macro: macro_f1(cm),
            precision_macro: macro_precision(cm),
            sensitivity_macro: macro_sensitivity(cm),
            specificity_macro: macro_specificity(cm),
            kappa_qwk,
            micro: MicroMetrics {
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
                precision: ratio(tp, tp + fp),
                f1: ratio(tp, tp + 0.5 * (fn_ + fp)),
            },
            per_class,
            confusion: cm.clone(),
        }
    }

    pub fn from_predictions(truths: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        Ok(MetricsReport::from_confusion(&ConfusionMatrix::from_predictions(
            truths, preds, classes,
        )?))
    }

    /// TOML text with the top-level keys `accuracy`, `f1_macro`,
    /// `precision_macro`, `sensitivity_macro`, `specificity_macro`,
    /// `kappa_qwk`, `confusion_matrix` and a `per_class.DR<i>` table per
    /// class.
    pub fn to_toml(&self) -> String {
        let text = ReportText {
            accuracy: self.accuracy,
            f1_macro: self.f1_macro,
            precision_macro: self.precision_macro,
            sensitivity_macro: self.sensitivity_macro,
            specificity_macro: self.specificity_macro,
            kappa_qwk: self.kappa_qwk.unwrap_or(0.0),
            confusion_matrix: self.confusion.rows(),
            per_class: self
                .per_class
                .iter()
                .enumerate()
                .map(|(i, m)| (format!("DR{i}"), m))
                .collect(),
        };
        toml::to_string(&text).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
