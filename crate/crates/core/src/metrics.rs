//! Binary confusion matrices and the positive-class metrics.
//!
//! Any metric whose denominator is zero is defined as 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::IdMap;

pub const ZERO_DIVISION_NOTE: &str = "metrics with a zero denominator are reported as 0";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("id sets differ ({count} ids in the symmetric difference, e.g. {sample:?})")]
    IdSetMismatch { count: usize, sample: Vec<String> },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
}

/// Tallies with Hateful as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, gold: Label, pred: Label) {
        match (gold.is_positive(), pred.is_positive()) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// The same matrix with NotHateful treated as positive.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = ConfusionMatrix>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl MetricsReport {
    /// Arithmetic mean of each metric over `reports`.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
        if reports.is_empty() {
            return Err(MetricsError::EmptyEvaluation);
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            precision: sum(|r| r.precision),
            recall: sum(|r| r.recall),
            f1: sum(|r| r.f1),
            accuracy: sum(|r| r.accuracy),
        })
    }
}

/// Metrics plus the counts they came from, as written to JSON outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl MetricsRecord {
    pub fn new(report: MetricsReport, cm: ConfusionMatrix) -> Self {
        MetricsRecord {
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            accuracy: report.accuracy,
            tp: cm.tp,
            fp: cm.fp,
            fn_: cm.fn_,
            tn: cm.tn,
        }
    }
}

pub fn confusion(gold: &IdMap<Label>, pred: &IdMap<Label>) -> Result<ConfusionMatrix, MetricsError> {
    check_same_ids(gold.keys(), pred.keys())?;
    if gold.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let mut cm = ConfusionMatrix::default();
    for (id, &g) in gold {
        cm.record(g, pred[id]);
    }
    Ok(cm)
}

/// Fails with the size of the symmetric difference (and up to ten sample ids)
/// when the two sorted id sequences differ.
pub fn check_same_ids<'a>(
    a: impl Iterator<Item = &'a String>,
    b: impl Iterator<Item = &'a String>,
) -> Result<(), MetricsError> {
    let a: std::collections::BTreeSet<&String> = a.collect();
    let b: std::collections::BTreeSet<&String> = b.collect();
    let diff: Vec<&&String> = a.symmetric_difference(&b).collect();
    if diff.is_empty() {
        return Ok(());
    }
    Err(MetricsError::IdSetMismatch {
        count: diff.len(),
        sample: diff.iter().take(10).map(|s| s.to_string()).collect(),
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = f1_from(precision, recall);
    let accuracy = ratio(cm.tp + cm.tn, total);
    Ok(MetricsReport { precision, recall, f1, accuracy })
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Display rounding to two decimals, half-up. A small epsilon absorbs binary
/// representation error so that 0.615 renders as 0.62.
pub fn round2(x: f64) -> f64 {
    ((x * 100.0) + 0.5 + 1e-9).floor() / 100.0
}

pub fn fmt2(x: f64) -> String {
    format!("{:.2}", round2(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(pairs: &[(&str, Label)]) -> IdMap<Label> {
        pairs.iter().map(|(i, l)| (i.to_string(), *l)).collect()
    }

    #[test]
    fn tallies_small_case() {
        use Label::*;
        let gold = ids(&[("a", Hateful), ("b", Hateful), ("c", NotHateful)]);
        let pred = ids(&[("a", Hateful), ("b", NotHateful), ("c", NotHateful)]);
        assert_eq!(confusion(&gold, &pred).unwrap(), ConfusionMatrix { tp: 1, fp: 0, fn_: 1, tn: 1 });
    }

    #[test]
    fn mismatched_and_empty_inputs() {
        use Label::*;
        let gold = ids(&[("a", Hateful), ("b", Hateful)]);
        let pred = ids(&[("a", Hateful), ("c", Hateful)]);
        assert_eq!(
            confusion(&gold, &pred),
            Err(MetricsError::IdSetMismatch { count: 2, sample: vec!["b".into(), "c".into()] })
        );
        assert_eq!(confusion(&IdMap::new(), &IdMap::new()), Err(MetricsError::EmptyEvaluation));
        assert_eq!(compute_metrics(&ConfusionMatrix::default()), Err(MetricsError::EmptyEvaluation));
    }

    #[test]
    fn hand_computed_metrics() {
        // precision 5/6, recall 5/7, f1 10/13, accuracy 15/18
        let m = compute_metrics(&ConfusionMatrix { tp: 5, fp: 1, fn_: 2, tn: 10 }).unwrap();
        assert!((m.precision - 0.8333).abs() < 5e-5);
        assert!((m.recall - 0.7143).abs() < 5e-5);
        assert!((m.f1 - 0.7692).abs() < 5e-5);
        assert!((m.accuracy - 0.8333).abs() < 5e-5);
        assert!((m.f1 - 10.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn zero_division_convention() {
        let m = compute_metrics(&ConfusionMatrix { tp: 0, fp: 0, fn_: 0, tn: 10 }).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn highest_sum_row_f1() {
        let f1 = f1_from(0.45, 0.96);
        assert!((f1 - 0.6128).abs() < 5e-5);
        assert_eq!(fmt2(f1), "0.61");
    }

    #[test]
    fn all_positive_predictor_on_large_corpus() {
        let cm = ConfusionMatrix { tp: 1191, fp: 9637, fn_: 0, tn: 0 };
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.accuracy, 1191.0 / 10828.0);
        assert_eq!(m.precision, m.accuracy);
        assert_eq!(fmt2(m.accuracy), "0.11");
    }

    #[test]
    fn display_rounding_is_half_up() {
        assert_eq!(fmt2(0.615), "0.62");
        assert_eq!(fmt2(0.125), "0.13");
        assert_eq!(fmt2(0.7734), "0.77");
        assert_eq!(fmt2(1.0), "1.00");
        assert_eq!(fmt2(0.0), "0.00");
    }

    #[test]
    fn metrics_json_keys() {
        let cm = ConfusionMatrix { tp: 1, fp: 2, fn_: 3, tn: 4 };
        let rec = MetricsRecord::new(compute_metrics(&cm).unwrap(), cm);
        let v: serde_json::Value = serde_json::to_value(rec).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["accuracy", "f1", "fn", "fp", "precision", "recall", "tn", "tp"]);
    }

    fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500)
            .prop_filter("nonempty", |(a, b, c, d)| a + b + c + d > 0)
            .prop_map(|(tp, fp, fn_, tn)| ConfusionMatrix { tp, fp, fn_, tn })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metrics_are_bounded(cm in matrix()) {
            let m = compute_metrics(&cm).unwrap();
            for v in [m.precision, m.recall, m.f1, m.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn f1_is_harmonic_mean(cm in matrix().prop_filter("tp > 0", |c| c.tp > 0)) {
            let m = compute_metrics(&cm).unwrap();
            let p = cm.tp as f64 / (cm.tp + cm.fp) as f64;
            let r = cm.tp as f64 / (cm.tp + cm.fn_) as f64;
            prop_assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }

        #[test]
        fn swapping_positive_class_keeps_accuracy(cm in matrix()) {
            let s = cm.swapped();
            prop_assert_eq!((s.tp, s.tn, s.fp, s.fn_), (cm.tn, cm.tp, cm.fn_, cm.fp));
            prop_assert_eq!(compute_metrics(&s).unwrap().accuracy, compute_metrics(&cm).unwrap().accuracy);
        }
    }
}
