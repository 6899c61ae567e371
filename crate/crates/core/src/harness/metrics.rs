//! Classification metrics and score aggregation.

use crate::error::{Error, Result};

/// `confusion[truth][pred]` counts.
pub fn confusion_matrix(predictions: &[usize], truths: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != truths.len() {
        return Err(Error::dim("confusion_matrix", &[predictions.len()], &[truths.len()]));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::Input(format!("label {} out of range for {classes} classes", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class F1 from a confusion matrix; classes without TP, FP or FN score 0.
pub fn per_class_f1(confusion: &[Vec<usize>]) -> Vec<f64> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let fp = (0..k).filter(|&r| r != c).map(|r| confusion[r][c]).sum::<usize>() as f64;
            let fn_ = (0..k).filter(|&p| p != c).map(|p| confusion[c][p]).sum::<usize>() as f64;
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 scores.
pub fn macro_f1(predictions: &[usize], truths: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 {
        return Ok(0.0);
    }
    let cm = confusion_matrix(predictions, truths, classes)?;
    Ok(per_class_f1(&cm).iter().sum::<f64>() / classes as f64)
}

/// Mean and sample standard deviation; the deviation of fewer than two scores is 0.
pub fn mean_std(scores: &[f64]) -> (f64, f64) {
    let n = scores.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_cases() {
        let m = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((m - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[2, 0, 1], &[2, 0, 1], 3).unwrap(), 1.0);
        let all_a = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((all_a - 1.0 / 3.0).abs() < 1e-12);
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
        assert!(macro_f1(&[5], &[0], 2).is_err());
    }

    #[test]
    fn aggregation_conventions() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-12);
        assert!((s - 0.141_421_356_237_309_5).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn confusion_rows_sum_to_support() {
        let cm = confusion_matrix(&[0, 2, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(cm.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(), vec![1, 2, 1]);
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..50), seed in any::<u64>()) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            let mut s = seed;
            for i in (1..idx.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                idx.swap(i, (s >> 33) as usize % (i + 1));
            }
            let pp: Vec<_> = idx.iter().map(|&i| p[i]).collect();
            let tt: Vec<_> = idx.iter().map(|&i| t[i]).collect();
            prop_assert_eq!(macro_f1(&p, &t, 4).unwrap(), macro_f1(&pp, &tt, 4).unwrap());
        }

        #[test]
        fn bounded(pairs in proptest::collection::vec((0usize..5, 0usize..5), 0..40)) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let m = macro_f1(&p, &t, 5).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
