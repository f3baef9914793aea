//! Evaluation metrics: error counting and accuracy for single-label
//! tasks, the micro/macro/weighted/samples F1 family for multilabel
//! tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All metrics of one evaluation. Single-label tasks derive the F1 family
/// from one-hot indicators (micro-F1 then equals accuracy); multilabel
/// tasks use subset accuracy (all labels of a sample correct) for the
/// accuracy fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub error_count: usize,
    pub accuracy: f64,
    /// Mean of per-class accuracy (per-class recall), over classes that
    /// appear in the truth.
    pub macro_accuracy: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub f1_samples: f64,
}

impl MetricSet {
    /// The scalar a validation loop compares: samples-F1 for multilabel
    /// tasks, accuracy otherwise. Higher is better.
    pub fn primary(&self, multilabel: bool) -> f64 {
        if multilabel {
            self.f1_samples
        } else {
            self.accuracy
        }
    }

    /// `(name, value)` rows for reporting, in a stable order.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("error_count", self.error_count as f64),
            ("accuracy", self.accuracy),
            ("macro_accuracy", self.macro_accuracy),
            ("f1_micro", self.f1_micro),
            ("f1_macro", self.f1_macro),
            ("f1_weighted", self.f1_weighted),
            ("f1_samples", self.f1_samples),
        ]
    }
}

/// The four F1 aggregations over binary indicator matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Set {
    pub micro: f64,
    pub macro_: f64,
    pub weighted: f64,
    pub samples: f64,
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        // No true and no predicted positives: contributes 0 by convention.
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Compute micro/macro/weighted/samples F1 over row-major `[n, k]`
/// prediction and truth indicators.
pub fn f1_scores(pred: &[bool], truth: &[bool], n: usize, k: usize) -> Result<F1Set> {
    if pred.len() != n * k || truth.len() != n * k {
        return Err(Error::Shape(format!(
            "indicator matrices must be {n}x{k}: got {} and {} entries",
            pred.len(),
            truth.len()
        )));
    }
    if n == 0 || k == 0 {
        return Err(Error::Input("f1 scores need at least one sample and one label".into()));
    }
    // Per-class confusion counts, accumulated sample-major.
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for i in 0..n {
        for c in 0..k {
            match (pred[i * k + c], truth[i * k + c]) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let (tp_all, fp_all, fn_all) = (
        tp.iter().sum::<usize>(),
        fp.iter().sum::<usize>(),
        fn_.iter().sum::<usize>(),
    );
    let micro = f1_from_counts(tp_all, fp_all, fn_all);
    let per_class: Vec<f64> = (0..k).map(|c| f1_from_counts(tp[c], fp[c], fn_[c])).collect();
    let macro_ = per_class.iter().sum::<f64>() / k as f64;
    let support: Vec<usize> = (0..k).map(|c| tp[c] + fn_[c]).collect();
    let total_support: usize = support.iter().sum();
    let weighted = if total_support == 0 {
        0.0
    } else {
        (0..k).map(|c| support[c] as f64 * per_class[c]).sum::<f64>() / total_support as f64
    };
    let samples = (0..n)
        .map(|i| {
            let row_tp = (0..k).filter(|&c| pred[i * k + c] && truth[i * k + c]).count();
            let row_fp = (0..k).filter(|&c| pred[i * k + c] && !truth[i * k + c]).count();
            let row_fn = (0..k).filter(|&c| !pred[i * k + c] && truth[i * k + c]).count();
            f1_from_counts(row_tp, row_fp, row_fn)
        })
        .sum::<f64>()
        / n as f64;
    Ok(F1Set { micro, macro_, weighted, samples })
}

/// Metrics for argmax predictions against integer class labels.
pub fn single_label_metrics(pred: &[u32], truth: &[u32], n_classes: usize) -> Result<MetricSet> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::Input("empty evaluation set".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c as usize >= n_classes) {
        return Err(Error::Input(format!("class id {bad} out of range for {n_classes} classes")));
    }
    let errors = pred.iter().zip(truth).filter(|(p, t)| p != t).count();
    let accuracy = 1.0 - errors as f64 / n as f64;

    // Per-class accuracy = recall of that class; average over classes
    // present in the truth.
    let mut correct = vec![0usize; n_classes];
    let mut count = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        count[t as usize] += 1;
        if p == t {
            correct[t as usize] += 1;
        }
    }
    let present = count.iter().filter(|&&c| c > 0).count();
    let macro_accuracy = (0..n_classes)
        .filter(|&c| count[c] > 0)
        .map(|c| correct[c] as f64 / count[c] as f64)
        .sum::<f64>()
        / present as f64;

    let onehot = |labels: &[u32]| -> Vec<bool> {
        let mut m = vec![false; n * n_classes];
        for (i, &c) in labels.iter().enumerate() {
            m[i * n_classes + c as usize] = true;
        }
        m
    };
    let f1 = f1_scores(&onehot(pred), &onehot(truth), n, n_classes)?;
    Ok(MetricSet {
        error_count: errors,
        accuracy,
        macro_accuracy,
        f1_micro: f1.micro,
        f1_macro: f1.macro_,
        f1_weighted: f1.weighted,
        f1_samples: f1.samples,
    })
}

/// Metrics for thresholded multilabel predictions (row-major `[n, k]`
/// indicators). The accuracy fields use the subset convention: a sample
/// counts as correct only when its whole label set matches.
pub fn multilabel_metrics(pred: &[bool], truth: &[bool], n: usize, k: usize) -> Result<MetricSet> {
    let f1 = f1_scores(pred, truth, n, k)?;
    let errors = (0..n).filter(|&i| pred[i * k..(i + 1) * k] != truth[i * k..(i + 1) * k]).count();
    let accuracy = 1.0 - errors as f64 / n as f64;
    // Per-label binary accuracy, averaged over labels.
    let macro_accuracy = (0..k)
        .map(|c| {
            let agree = (0..n).filter(|&i| pred[i * k + c] == truth[i * k + c]).count();
            agree as f64 / n as f64
        })
        .sum::<f64>()
        / k as f64;
    Ok(MetricSet {
        error_count: errors,
        accuracy,
        macro_accuracy,
        f1_micro: f1.micro,
        f1_macro: f1.macro_,
        f1_weighted: f1.weighted,
        f1_samples: f1.samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::f1_oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels = [0u32, 1, 2, 1, 0, 2];
        let m = single_label_metrics(&labels, &labels, 3).unwrap();
        assert_eq!(m.error_count, 0);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_accuracy, 1.0);
        assert_eq!(m.f1_micro, 1.0);
        assert_eq!(m.f1_macro, 1.0);
        assert_eq!(m.f1_weighted, 1.0);
        assert_eq!(m.f1_samples, 1.0);
    }

    #[test]
    fn error_count_matches_accuracy_identity() {
        let pred = [0u32, 1, 2, 2, 0, 1, 1, 0];
        let truth = [0u32, 1, 1, 2, 0, 0, 1, 2];
        let m = single_label_metrics(&pred, &truth, 3).unwrap();
        assert_eq!(m.error_count, 3);
        let n = pred.len() as f64;
        assert!((m.error_count as f64 - n * (1.0 - m.accuracy)).abs() < 1e-12);
        // Micro-F1 over one-hot rows equals accuracy.
        assert!((m.f1_micro - m.accuracy).abs() < 1e-12);
    }

    #[test]
    fn macro_accuracy_averages_per_class_recall() {
        // Class 0: 2/2 correct; class 1: 1/2; class 2 absent from truth.
        let pred = [0u32, 0, 1, 0];
        let truth = [0u32, 0, 1, 1];
        let m = single_label_metrics(&pred, &truth, 3).unwrap();
        assert!((m.macro_accuracy - 0.75).abs() < 1e-12);
    }

    #[test]
    fn hand_checked_micro_f1() {
        // Single label column: preds [1,0,1,1] vs truth [1,0,0,1]:
        // tp=2, fp=1, fn=0 → F1 = 2·2/(4+1) = 0.8.
        let pred = [true, false, true, true];
        let truth = [true, false, false, true];
        let f1 = f1_scores(&pred, &truth, 4, 1).unwrap();
        assert!((f1.micro - 0.8).abs() < 1e-12);
        assert!((f1.macro_ - 0.8).abs() < 1e-12);
        // Samples view: rows score 1, 0 (empty/empty), 0 (fp), 1.
        assert!((f1.samples - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_negative_predictions_give_zero_micro_f1() {
        let pred = vec![false; 12];
        let mut truth = vec![false; 12];
        truth[1] = true;
        truth[7] = true;
        let m = multilabel_metrics(&pred, &truth, 4, 3).unwrap();
        assert_eq!(m.f1_micro, 0.0);
        assert_eq!(m.f1_macro, 0.0);
        assert_eq!(m.f1_weighted, 0.0);
        assert_eq!(m.f1_samples, 0.0);
        assert_eq!(m.error_count, 2);
    }

    #[test]
    fn weighted_f1_with_equal_supports_equals_macro_f1() {
        // Two labels, both with support 2.
        let truth = [
            true, false, //
            true, false, //
            false, true, //
            false, true,
        ];
        let pred = [
            true, false, //
            false, true, //
            false, true, //
            true, true,
        ];
        let f1 = f1_scores(&pred, &truth, 4, 2).unwrap();
        assert!((f1.weighted - f1.macro_).abs() < 1e-12);
    }

    #[test]
    fn f1_family_matches_brute_force_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for case in 0..100 {
            let n = rng.gen_range(1..=50);
            let k = rng.gen_range(1..=9);
            let density = rng.gen_range(0.05..0.6);
            let pred: Vec<bool> = (0..n * k).map(|_| rng.gen_bool(density)).collect();
            let truth: Vec<bool> = (0..n * k).map(|_| rng.gen_bool(density)).collect();
            let got = f1_scores(&pred, &truth, n, k).unwrap();
            let want = f1_oracle(&pred, &truth, n, k);
            assert_eq!(got.micro, want.0, "case {case} micro");
            assert_eq!(got.macro_, want.1, "case {case} macro");
            assert_eq!(got.weighted, want.2, "case {case} weighted");
            assert_eq!(got.samples, want.3, "case {case} samples");
        }
    }

    #[test]
    fn shape_and_emptiness_errors() {
        assert!(f1_scores(&[true], &[true, false], 2, 1).is_err());
        assert!(f1_scores(&[], &[], 0, 3).is_err());
        assert!(single_label_metrics(&[], &[], 4).is_err());
        assert!(single_label_metrics(&[4], &[0], 4).is_err());
    }
}
