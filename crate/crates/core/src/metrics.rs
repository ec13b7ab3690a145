//! Per-video AUC, F1 for the fake class, and batch-averaged accuracy.

use crate::error::{Error, Result};

/// Probability that a random (fake, real) pair is ordered correctly, with tied
/// scores counting one half. `scores` holds `(fake probability, label)`.
pub fn auc(scores: &[(f64, usize)]) -> Result<f64> {
    let pos = scores.iter().filter(|s| s.1 == 1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::NonFinite("AUC score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    // Mann–Whitney U via average ranks; every quantity is a multiple of 1/2
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| scores[k].1 == 1).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// F1 of the fake class with `score >= threshold` predicted fake; 0 when
/// precision and recall are both 0.
pub fn f1(scores: &[(f64, usize)], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &(s, label) in scores {
        match (s >= threshold, label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = tp/(tp+fp), R = tp/(tp+fn), as one division
    (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
}

/// Unweighted mean of per-batch accuracies, whatever the batch sizes.
pub fn epoch_accuracy(batch_accuracies: &[f64]) -> Result<f64> {
    if batch_accuracies.is_empty() {
        return Err(Error::InvalidArgument("epoch accuracy of zero batches".into()));
    }
    Ok(batch_accuracies.iter().sum::<f64>() / batch_accuracies.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_auc() {
        let s = [(0.9, 1), (0.4, 1), (0.6, 0), (0.1, 0)];
        assert_eq!(auc(&s).unwrap(), 0.75);
        assert_eq!(auc(&[(0.9, 1), (0.1, 0)]).unwrap(), 1.0);
        assert_eq!(auc(&[(0.3, 1), (0.3, 0), (0.3, 1)]).unwrap(), 0.5);
        assert!(matches!(auc(&[(0.3, 1)]), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn worked_f1() {
        let mut s = vec![(0.9, 1); 8];
        s.extend([(0.8, 0); 2]);
        s.extend([(0.1, 1); 2]);
        let v = f1(&s, 0.5);
        assert_eq!(v, 0.8);
        assert_eq!(f1(&[(0.9, 1), (0.1, 0)], 0.5), 1.0);
        assert_eq!(f1(&[(0.1, 1), (0.2, 0)], 0.5), 0.0);
    }

    #[test]
    fn f1_matches_hand_confusion_counts_exhaustively() {
        for n in 1..=4 {
            for labels in 0..1u32 << n {
                for preds in 0..1u32 << n {
                    let bit = |m: u32, i: usize| (m >> i) & 1 == 1;
                    let s: Vec<(f64, usize)> =
                        (0..n).map(|i| (if bit(preds, i) { 0.7 } else { 0.2 }, bit(labels, i) as usize)).collect();
                    let tp = (0..n).filter(|&i| bit(preds, i) && bit(labels, i)).count() as f64;
                    let fp = (0..n).filter(|&i| bit(preds, i) && !bit(labels, i)).count() as f64;
                    let fneg = (0..n).filter(|&i| !bit(preds, i) && bit(labels, i)).count() as f64;
                    let want = if tp == 0.0 {
                        0.0
                    } else {
                        let (p, r) = (tp / (tp + fp), tp / (tp + fneg));
                        2.0 * p * r / (p + r)
                    };
                    let got = f1(&s, 0.5);
                    assert!((got - want).abs() < 1e-15, "labels {labels:b} preds {preds:b}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn batch_average_is_unweighted() {
        assert_eq!(epoch_accuracy(&[1.0, 0.5]).unwrap(), 0.75);
        assert_eq!(epoch_accuracy(&[0.625]).unwrap(), 0.625);
        // sizes 8 and 2 would give 0.8 if weighted
        assert_eq!(epoch_accuracy(&[1.0, 0.0]).unwrap(), 0.5);
        assert!(epoch_accuracy(&[]).is_err());
    }
}
