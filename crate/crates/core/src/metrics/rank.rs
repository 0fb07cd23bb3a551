use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    /// `true` for anomalous (positive) samples.
    pub positive: bool,
}

impl ScoredSample {
    pub fn new(score: f64, positive: bool) -> Self {
        ScoredSample { score, positive }
    }
}

/// Counts of positives and negatives sharing one score value, in ascending
/// score order.
#[derive(Debug, Clone, Copy)]
struct TieGroup {
    score: f64,
    pos: u64,
    neg: u64,
}

fn tie_groups(samples: &[ScoredSample]) -> Result<Vec<TieGroup>> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {}", s.score)));
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal));
    let mut groups: Vec<TieGroup> = Vec::new();
    for s in sorted {
        match groups.last_mut() {
            Some(g) if g.score == s.score => {
                if s.positive {
                    g.pos += 1
                } else {
                    g.neg += 1
                }
            }
            _ => groups.push(TieGroup {
                score: s.score,
                pos: s.positive as u64,
                neg: !s.positive as u64,
            }),
        }
    }
    Ok(groups)
}

/// Area under the ROC curve, `P(pos > neg) + 0.5 * P(pos == neg)`.
///
/// Pair counts are accumulated exactly in integers (doubled to absorb the
/// half credit for ties) so the result depends only on the ordering of the
/// scores.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let groups = tie_groups(samples)?;
    let n_pos: u64 = groups.iter().map(|g| g.pos).sum();
    let n_neg: u64 = groups.iter().map(|g| g.neg).sum();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut neg_below: u128 = 0;
    let mut twice_wins: u128 = 0;
    for g in &groups {
        twice_wins += g.pos as u128 * (2 * neg_below + g.neg as u128);
        neg_below += g.neg as u128;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision, `sum_k (R_k - R_{k-1}) * P_k` over
/// descending distinct thresholds. Tied scores form a single threshold.
pub fn average_precision(samples: &[ScoredSample]) -> Result<f64> {
    let groups = tie_groups(samples)?;
    let n_pos: u64 = groups.iter().map(|g| g.pos).sum();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut tp: u64 = 0;
    let mut fp: u64 = 0;
    let mut ap = 0.0;
    for g in groups.iter().rev() {
        tp += g.pos;
        fp += g.neg;
        if g.pos > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (g.pos as f64 / n_pos as f64) * precision;
        }
    }
    Ok(ap)
}

/// ROC operating points `(fpr, tpr)` from the strictest threshold down,
/// starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>> {
    let groups = tie_groups(samples)?;
    let n_pos: u64 = groups.iter().map(|g| g.pos).sum();
    let n_neg: u64 = groups.iter().map(|g| g.neg).sum();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for g in groups.iter().rev() {
        tp += g.pos;
        fp += g.neg;
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(neg: &[f64], pos: &[f64]) -> Vec<ScoredSample> {
        neg.iter()
            .map(|&s| ScoredSample::new(s, false))
            .chain(pos.iter().map(|&s| ScoredSample::new(s, true)))
            .collect()
    }

    fn labelled(scores: &[f64], labels: &[u8]) -> Vec<ScoredSample> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| ScoredSample::new(s, l == 1))
            .collect()
    }

    /// O(n^2) pair counting.
    fn auroc_pairs(s: &[ScoredSample]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for p in s.iter().filter(|x| x.positive) {
            for n in s.iter().filter(|x| !x.positive) {
                den += 1.0;
                if p.score > n.score {
                    num += 1.0
                } else if p.score == n.score {
                    num += 0.5
                }
            }
        }
        num / den
    }

    /// Precision and recall recomputed from scratch at every distinct threshold.
    fn ap_brute(s: &[ScoredSample]) -> f64 {
        let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = s.iter().filter(|x| x.positive).count() as f64;
        let (mut prev_recall, mut ap) = (0.0, 0.0);
        for t in thresholds {
            let tp = s.iter().filter(|x| x.positive && x.score >= t).count() as f64;
            let predicted = s.iter().filter(|x| x.score >= t).count() as f64;
            let recall = tp / n_pos;
            ap += (recall - prev_recall) * (tp / predicted);
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn perfect_separation() {
        assert_eq!(auroc(&samples(&[0.1, 0.2], &[0.3, 0.4])).unwrap(), 1.0);
    }

    #[test]
    fn full_tie_is_half() {
        assert_eq!(auroc(&samples(&[0.5], &[0.5])).unwrap(), 0.5);
    }

    #[test]
    fn interleaved_pairs() {
        let s = samples(&[0.1, 0.4], &[0.3, 0.5]);
        assert_eq!(auroc_pairs(&s), 0.75);
        assert_eq!(auroc(&s).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auroc(&samples(&[0.1, 0.2], &[])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(auroc(&samples(&[], &[0.3])).is_err());
    }

    #[test]
    fn ap_positive_ranked_first() {
        assert_eq!(average_precision(&labelled(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
    }

    #[test]
    fn ap_three_samples() {
        let s = labelled(&[0.9, 0.8, 0.7], &[0, 1, 1]);
        let expected = ap_brute(&s);
        assert!((expected - 7.0 / 12.0).abs() < 1e-15);
        assert!((average_precision(&s).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn ap_all_positive() {
        assert_eq!(average_precision(&labelled(&[0.3, 0.1, 0.3], &[1, 1, 1])).unwrap(), 1.0);
    }

    #[test]
    fn ap_no_positive_is_undefined() {
        assert!(average_precision(&labelled(&[0.3], &[0])).is_err());
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&samples(&[0.1, 0.4], &[0.3, 0.5])).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        let area: f64 = pts
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum();
        assert!((area - 0.75).abs() < 1e-15);
    }

    fn arb_samples() -> impl Strategy<Value = Vec<ScoredSample>> {
        // Scores on a coarse grid so ties are frequent.
        prop::collection::vec((0u8..12, any::<bool>()), 2..120).prop_map(|v| {
            v.into_iter()
                .map(|(s, p)| ScoredSample::new(s as f64 / 4.0, p))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(s in arb_samples()) {
            let n_pos = s.iter().filter(|x| x.positive).count();
            prop_assume!(n_pos > 0 && n_pos < s.len());
            prop_assert!((auroc(&s).unwrap() - auroc_pairs(&s)).abs() < 1e-9);
            prop_assert!((average_precision(&s).unwrap() - ap_brute(&s)).abs() < 1e-9);
        }

        #[test]
        fn auroc_invariant_under_increasing_affine(s in arb_samples(), a in 0.01f64..100.0, b in -50f64..50.0) {
            let n_pos = s.iter().filter(|x| x.positive).count();
            prop_assume!(n_pos > 0 && n_pos < s.len());
            let t: Vec<_> = s.iter().map(|x| ScoredSample::new(a * x.score + b, x.positive)).collect();
            prop_assert_eq!(auroc(&s).unwrap().to_bits(), auroc(&t).unwrap().to_bits());
        }
    }
}
