//! Confusion-matrix based evaluation metrics.
//!
//! Class 0 is the normal condition; the false alarm rate is the fraction of
//! normal samples predicted as any fault. Per-class precision, recall, F1
//! and false discovery rate follow the usual one-vs-rest definitions, with
//! undefined ratios reported as 0 and flagged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;

use crate::data::{make_batches, Window};
use crate::error::{Error, Result};
use crate::model::{predictions, Mode, Model};
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub false_discovery: f64,
    /// Number of true samples of this class.
    pub support: usize,
    /// False when the class was never predicted (precision/FDR reported 0).
    pub precision_defined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `confusion[truth][prediction]`, counts.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
    pub accuracy: f64,
    pub misclassification_rate: f64,
    pub false_alarm_rate: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Derives every reported rate from a square count matrix.
pub fn metrics_from_confusion(confusion: Vec<Vec<usize>>) -> Result<MetricsReport> {
    let num_classes = confusion.len();
    if num_classes == 0 || confusion.iter().any(|row| row.len() != num_classes) {
        return Err(Error::Contract("confusion matrix must be square and non-empty".into()));
    }
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Contract("confusion matrix holds no samples".into()));
    }
    let trace: usize = (0..num_classes).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / total as f64;

    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let fp: usize = (0..num_classes).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
        let fn_: usize = (0..num_classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        let support = tp + fn_;
        let precision_defined = tp + fp > 0;
        let precision = if precision_defined { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let false_discovery = if precision_defined { fp as f64 / (fp + tp) as f64 } else { 0.0 };
        per_class.push(ClassMetrics { precision, recall, f1, false_discovery, support, precision_defined });
    }

    let normal_total: usize = confusion[0].iter().sum();
    let false_alarm_rate = if normal_total > 0 {
        (normal_total - confusion[0][0]) as f64 / normal_total as f64
    } else {
        0.0
    };

    Ok(MetricsReport {
        confusion,
        total,
        accuracy,
        misclassification_rate: 1.0 - accuracy,
        false_alarm_rate,
        per_class,
    })
}

/// Builds the confusion matrix from parallel truth/prediction slices.
pub fn confusion_from_pairs(truths: &[usize], preds: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if truths.len() != preds.len() {
        return Err(Error::Contract("truth/prediction length mismatch".into()));
    }
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truths.iter().zip(preds) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Contract(format!("class id out of range: truth {t}, pred {p}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Runs the model over the test windows in eval mode and reports metrics.
pub fn evaluate(model: &Model, test: &[Window], batch_size: usize) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Contract("evaluate: empty test set".into()));
    }
    if test.iter().any(|w| w.num_features != model.config.num_features) {
        return Err(Error::Contract(format!(
            "evaluate: windows carry {} features, checkpoint was trained on {}",
            test.iter().map(|w| w.num_features).find(|&f| f != model.config.num_features).unwrap(),
            model.config.num_features
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0); // untouched in eval mode
    let mut truths = Vec::with_capacity(test.len());
    let mut preds = Vec::with_capacity(test.len());
    for batch in make_batches(test, batch_size, false, &mut rng)? {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.inputs, Mode::Eval, &mut rng)?;
        preds.extend(predictions(&g.value(out.logits))?);
        truths.extend(batch.labels);
    }
    let confusion = confusion_from_pairs(&truths, &preds, model.config.num_classes)?;
    metrics_from_confusion(confusion)
}

impl MetricsReport {
    /// Plain-text summary (one line per class plus the aggregate rates).
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples: {}", self.total);
        let _ = writeln!(s, "accuracy: {}", self.accuracy);
        let _ = writeln!(s, "misclassification_rate: {}", self.misclassification_rate);
        let _ = writeln!(s, "false_alarm_rate: {}", self.false_alarm_rate);
        let _ = writeln!(s, "class precision recall f1 fdr support flags");
        for (c, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "{c} {} {} {} {} {} {}",
                m.precision,
                m.recall,
                m.f1,
                m.false_discovery,
                m.support,
                if m.precision_defined { "-" } else { "precision-undefined" }
            );
        }
        s
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.summary_text())?;
        Ok(())
    }

    /// Confusion matrix as CSV: header `truth\\pred`, one row per true class.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let n = self.confusion.len();
        let mut s = String::from("truth");
        for c in 0..n {
            let _ = write!(s, ",pred{c}");
        }
        s.push('\n');
        for (r, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{r}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let confusion = vec![vec![5, 0, 0], vec![0, 4, 0], vec![0, 0, 6]];
        let r = metrics_from_confusion(confusion).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.false_alarm_rate, 0.0);
        assert_eq!(r.misclassification_rate, 0.0);
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0));
    }

    #[test]
    fn always_normal_predictor_on_balanced_three_classes() {
        // every sample predicted as class 0
        let confusion = vec![vec![10, 0, 0], vec![10, 0, 0], vec![10, 0, 0]];
        let r = metrics_from_confusion(confusion).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.false_alarm_rate, 0.0);
        assert_eq!(r.per_class[1].recall, 0.0);
        assert_eq!(r.per_class[2].recall, 0.0);
        assert!(!r.per_class[1].precision_defined);
    }

    #[test]
    fn two_class_hand_example() {
        // rows = truth (normal, fault1)
        let confusion = vec![vec![8, 2], vec![1, 9]];
        let r = metrics_from_confusion(confusion).unwrap();
        assert!((r.false_alarm_rate - 0.2).abs() < 1e-15);
        let f = &r.per_class[1];
        assert!((f.precision - 9.0 / 11.0).abs() < 1e-15);
        assert!((f.recall - 0.9).abs() < 1e-15);
        assert!((f.f1 - 18.0 / 21.0).abs() < 1e-12);
        assert!((f.f1 - 0.85714).abs() < 1e-5);
        assert!((f.false_discovery - 2.0 / 11.0).abs() < 1e-15);
        assert!((r.accuracy - 17.0 / 20.0).abs() < 1e-15);
        assert!((r.accuracy + r.misclassification_rate - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identities_on_randomized_matrices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            let n = rng.gen_range(1..8usize);
            let confusion: Vec<Vec<usize>> =
                (0..n).map(|_| (0..n).map(|_| rng.gen_range(0..20usize)).collect()).collect();
            let total: usize = confusion.iter().flatten().sum();
            if total == 0 {
                continue;
            }
            let row_sums: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
            let r = metrics_from_confusion(confusion.clone()).unwrap();
            assert_eq!(r.total, total);
            for (c, m) in r.per_class.iter().enumerate() {
                assert_eq!(m.support, row_sums[c], "row sums are per-class truth counts");
                for v in [m.precision, m.recall, m.f1, m.false_discovery] {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
            assert!((r.accuracy + r.misclassification_rate - 1.0).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&r.false_alarm_rate));
        }
    }

    #[test]
    fn pairs_build_the_expected_matrix() {
        let m = confusion_from_pairs(&[0, 1, 1, 2], &[0, 1, 0, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![1, 1, 0], vec![0, 0, 1]]);
        assert!(confusion_from_pairs(&[3], &[0], 3).is_err());
    }

    #[test]
    fn empty_confusion_rejected() {
        assert!(metrics_from_confusion(vec![]).is_err());
        assert!(metrics_from_confusion(vec![vec![0, 0], vec![0, 0]]).is_err());
    }
}
