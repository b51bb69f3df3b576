//! Classification metrics over confusion matrices, plus seed aggregation.
//!
//! All metrics are derived from integer counts, so equal counts give
//! bit-identical results regardless of how the matrix was assembled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K x K confusion matrix; `counts[true_class][predicted_class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Metric(format!("confusion matrix needs >= 2 classes, got {k}")));
        }
        Ok(ConfusionMatrix { k, counts: vec![0; k * k] })
    }

    /// Builds a matrix from `(true_class, predicted_class)` pairs.
    pub fn from_pairs(k: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(k)?;
        for &(t, p) in pairs {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) -> Result<()> {
        if true_class >= self.k || predicted >= self.k {
            return Err(Error::Contract(format!(
                "label pair ({true_class}, {predicted}) out of range for {} classes",
                self.k
            )));
        }
        self.counts[true_class * self.k + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of samples whose true class is `c` (support).
    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.k..(c + 1) * self.k].iter().sum()
    }

    /// Number of samples predicted as `c`.
    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|r| self.counts[r * self.k + c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i * self.k + i]).sum()
    }
}

/// Mean per-class recall. Errors if any class has zero support.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    let mut sum = 0.0;
    for c in 0..k {
        let support = cm.row_sum(c);
        if support == 0 {
            return Err(Error::Metric(format!(
                "balanced accuracy undefined: class {c} has no samples"
            )));
        }
        sum += cm.count(c, c) as f64 / support as f64;
    }
    Ok(sum / k as f64)
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`. Errors on an empty matrix.
/// When chance agreement `p_e` is 1 (all mass in a single class, which
/// forces `p_o` to 1 as well) the 0/0 limit is taken as 0: a constant
/// predictor shows no skill beyond chance.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metric("kappa undefined on an empty confusion matrix".into()));
    }
    let n = total as f64;
    let p_o = cm.trace() as f64 / n;
    let mut p_e = 0.0;
    for c in 0..cm.classes() {
        p_e += (cm.row_sum(c) as f64 * cm.col_sum(c) as f64) / (n * n);
    }
    if p_e >= 1.0 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Support-weighted mean of per-class F1 scores; a class whose precision and
/// recall are both zero (or undefined) contributes an F1 of zero.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metric("weighted F1 undefined on an empty confusion matrix".into()));
    }
    let n = total as f64;
    let mut sum = 0.0;
    for c in 0..cm.classes() {
        let tp = cm.count(c, c) as f64;
        let row = cm.row_sum(c) as f64;
        let col = cm.col_sum(c) as f64;
        let precision = if col > 0.0 { tp / col } else { 0.0 };
        let recall = if row > 0.0 { tp / row } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        sum += (row / n) * f1;
    }
    Ok(sum)
}

/// Mean and sample standard deviation across seeds; `std` is `None` for a
/// single seed so reports can flag it rather than print 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

/// Aggregates one metric across per-seed values (sample std, n - 1).
pub fn aggregate_seeds(values: &[f64]) -> Result<SeedSummary> {
    if values.is_empty() {
        return Err(Error::Metric("cannot aggregate zero seed values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite seed value in aggregation".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        None
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Some(var.sqrt())
    };
    Ok(SeedSummary { mean, std, n })
}

/// Median of the values (mean of the middle two for even counts).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("median of zero values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in median".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Ok(sorted[mid])
    } else {
        Ok((sorted[mid - 1] + sorted[mid]) / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        let k = rows.len();
        let mut m = ConfusionMatrix::new(k).unwrap();
        for (t, row) in rows.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    m.record(t, p).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn hand_worked_two_class_example() {
        // Recalls 8/10 and 6/10; p_o = 0.7, p_e = 0.5; per-class F1s are
        // 16/22 and 12/18 with equal supports.
        let m = cm(&[&[8, 2], &[4, 6]]);
        assert_abs_diff_eq!(balanced_accuracy(&m).unwrap(), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(cohens_kappa(&m).unwrap(), 0.4, epsilon = 1e-12);
        let f1_0 = 2.0 * (8.0 / 12.0) * 0.8 / (8.0 / 12.0 + 0.8);
        let f1_1 = 2.0 * 0.75 * 0.6 / (0.75 + 0.6);
        assert_abs_diff_eq!(
            weighted_f1(&m).unwrap(),
            0.5 * f1_0 + 0.5 * f1_1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = cm(&[&[5, 0, 0], &[0, 7, 0], &[0, 0, 2]]);
        assert_eq!(balanced_accuracy(&m).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&m).unwrap(), 1.0);
        assert_eq!(weighted_f1(&m).unwrap(), 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_truth_has_zero_kappa() {
        let m = cm(&[&[10, 0], &[10, 0]]);
        assert_abs_diff_eq!(cohens_kappa(&m).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(balanced_accuracy(&m).unwrap(), 0.5, epsilon = 1e-12);
        // Class 1 is never predicted: its F1 is defined as 0.
        let f1_0 = 2.0 * 0.5 * 1.0 / 1.5;
        assert_abs_diff_eq!(weighted_f1(&m).unwrap(), 0.5 * f1_0, epsilon = 1e-12);
    }

    #[test]
    fn undefined_cases_are_errors() {
        let empty = ConfusionMatrix::new(2).unwrap();
        assert!(matches!(balanced_accuracy(&empty), Err(Error::Metric(_))));
        assert!(matches!(cohens_kappa(&empty), Err(Error::Metric(_))));
        assert!(matches!(weighted_f1(&empty), Err(Error::Metric(_))));

        // Zero support for class 1.
        let m = cm(&[&[3, 1], &[0, 0]]);
        assert!(matches!(balanced_accuracy(&m), Err(Error::Metric(_))));

        // Everything lands in one class: chance agreement is 1, and the
        // degenerate ratio resolves to zero skill.
        let m = cm(&[&[9, 0], &[0, 0]]);
        assert_eq!(cohens_kappa(&m).unwrap(), 0.0);

        assert!(ConfusionMatrix::new(1).is_err());
        let mut m = ConfusionMatrix::new(2).unwrap();
        assert!(matches!(m.record(2, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn from_pairs_matches_manual_recording() {
        let pairs = [(0, 0), (0, 1), (1, 1), (1, 1), (2, 0)];
        let m = ConfusionMatrix::from_pairs(3, &pairs).unwrap();
        assert_eq!(m.count(0, 0), 1);
        assert_eq!(m.count(1, 1), 2);
        assert_eq!(m.row_sum(1), 2);
        assert_eq!(m.col_sum(0), 2);
        assert_eq!(m.trace(), 3);
        assert_eq!(m.total(), 5);
        assert!(ConfusionMatrix::from_pairs(2, &[(0, 5)]).is_err());
    }

    #[test]
    fn seed_aggregation_uses_sample_std_and_flags_single_seed() {
        let s = aggregate_seeds(&[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(s.mean, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.std.unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(s.n, 3);

        let single = aggregate_seeds(&[0.7]).unwrap();
        assert_eq!(single.mean, 0.7);
        assert_eq!(single.std, None);

        assert!(aggregate_seeds(&[]).is_err());
        assert!(aggregate_seeds(&[f64::NAN]).is_err());
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert_eq!(median(&[5.0]).unwrap(), 5.0);
        assert!(median(&[]).is_err());
    }

    proptest! {
        #[test]
        fn metric_ranges_hold_for_random_matrices(
            counts in proptest::collection::vec(0u64..40, 9)
        ) {
            let mut m = ConfusionMatrix::new(3).unwrap();
            for (i, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    m.record(i / 3, i % 3).unwrap();
                }
            }
            if let Ok(v) = balanced_accuracy(&m) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Ok(v) = cohens_kappa(&m) {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
            if let Ok(v) = weighted_f1(&m) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn metrics_are_invariant_under_class_relabelling(
            counts in proptest::collection::vec(1u64..20, 9)
        ) {
            let build = |perm: [usize; 3]| {
                let mut m = ConfusionMatrix::new(3).unwrap();
                for (i, &c) in counts.iter().enumerate() {
                    for _ in 0..c {
                        m.record(perm[i / 3], perm[i % 3]).unwrap();
                    }
                }
                m
            };
            let a = build([0, 1, 2]);
            let b = build([2, 0, 1]);
            prop_assert!(
                (balanced_accuracy(&a).unwrap() - balanced_accuracy(&b).unwrap()).abs() < 1e-12
            );
            prop_assert!((cohens_kappa(&a).unwrap() - cohens_kappa(&b).unwrap()).abs() < 1e-12);
            prop_assert!((weighted_f1(&a).unwrap() - weighted_f1(&b).unwrap()).abs() < 1e-12);
        }
    }
}
