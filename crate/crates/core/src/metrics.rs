//! Detection, ranking and clustering scores.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Harmonic mean of precision and recall; 0 when either is undefined or
/// there are no true positives.
pub fn f1_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    2.0 * precision * recall / (precision + recall)
}

/// Confusion counts of thresholded scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Counts predictions `score >= threshold` against `labels`.
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        check_lengths(scores.len(), labels.len())?;
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.tn + self.fn_;
        if total == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / total as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.tp, self.fp, self.fn_)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Area under the ROC curve, as the fraction of (positive, negative) pairs
/// where the positive scores higher, ties counting one half.
///
/// Computed from average ranks after one sort.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc_auc scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of positives, tied groups sharing their mean rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mean_rank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fraction of unordered element pairs on which two partitions agree
/// (together in both or apart in both).
pub fn rand_index<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + std::hash::Hash,
    B: Eq + std::hash::Hash,
{
    check_lengths(a.len(), b.len())?;
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let pairs = |k: u64| k * k.saturating_sub(1) / 2;
    let mut joint: HashMap<(&A, &B), u64> = HashMap::new();
    let mut rows: HashMap<&A, u64> = HashMap::new();
    let mut cols: HashMap<&B, u64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let total = pairs(n as u64);
    let both: u64 = joint.values().map(|&k| pairs(k)).sum();
    let in_a: u64 = rows.values().map(|&k| pairs(k)).sum();
    let in_b: u64 = cols.values().map(|&k| pairs(k)).sum();
    // Agreements = pairs together in both + pairs apart in both.
    let apart_both = total + both - in_a - in_b;
    Ok((both + apart_both) as f64 / total as f64)
}

/// 4-connected component labels of a binary `height × width` mask.
///
/// Background is 0; components are numbered from 1 in order of their first
/// pixel in row-major scan.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Result<Vec<u32>> {
    check_lengths(mask.len(), height * width)?;
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
    }
    Ok(labels)
}

/// Thresholds used by [`best_rand_index`]: 0.1, 0.2, …, 0.9.
pub fn rand_thresholds() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Best Rand index between the components of `probs >= t` and those of the
/// ground-truth mask over the threshold sweep. Returns `(threshold, score)`.
pub fn best_rand_index(probs: &[f64], truth: &[bool], height: usize, width: usize) -> Result<(f64, f64)> {
    check_lengths(probs.len(), truth.len())?;
    let reference = connected_components(truth, height, width)?;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for t in rand_thresholds() {
        let mask: Vec<bool> = probs.iter().map(|&p| p >= t).collect();
        let pred = connected_components(&mask, height, width)?;
        let score = rand_index(&pred, &reference)?;
        if score > best.1 {
            best = (t, score);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(5, 0, 0), 1.0);
        assert!((f1_score(2, 1, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_score(0, 3, 4), 0.0);
        assert_eq!(f1_score(0, 0, 0), 0.0);
    }

    #[test]
    fn auc_examples() {
        let auc = roc_auc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(roc_auc(&[0.2, 0.8], &[false, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn rand_examples() {
        assert_eq!(rand_index(&[1, 1, 2, 2], &[1, 1, 1, 2]).unwrap(), 0.5);
        assert_eq!(rand_index(&[1, 2], &[7, 7]).unwrap(), 0.0);
        assert_eq!(rand_index(&[3, 3, 4], &[3, 3, 4]).unwrap(), 1.0);
        assert!(rand_index(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn components_examples() {
        assert_eq!(connected_components(&[false; 9], 3, 3).unwrap(), vec![0; 9]);
        let diag = [true, false, false, true];
        assert_eq!(connected_components(&diag, 2, 2).unwrap(), vec![1, 0, 0, 2]);
        let ring = [true, true, true, true, false, true, true, true, true];
        assert!(connected_components(&ring, 3, 3).unwrap().iter().all(|&l| l <= 1));
    }

    #[test]
    fn confusion_counts() {
        let c = Confusion::from_scores(&[0.9, 0.2, 0.6, 0.4], &[true, false, false, true], 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(c.accuracy(), 0.5);
    }

    #[test]
    fn perfect_map_scores_one() {
        let truth = [true, true, false, false, false, false, false, true, true];
        let probs: Vec<f64> = truth.iter().map(|&t| if t { 0.95 } else { 0.05 }).collect();
        let (_, score) = best_rand_index(&probs, &truth, 3, 3).unwrap();
        assert_eq!(score, 1.0);
    }
}
