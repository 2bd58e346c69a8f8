//! Evaluation metrics and the variable-clustering diagnostic.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::Assignment;
use crate::rng::{Rng, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {preds} predictions vs {labels} labels")]
    Length { preds: usize, labels: usize },
    #[error("metric undefined on empty input")]
    Empty,
    #[error("metric undefined: need both positive and negative examples")]
    SingleClass,
    #[error("positive index {index} out of range for {len} candidates")]
    Index { index: usize, len: usize },
    #[error("clustering needs {0}")]
    Cluster(String),
}

fn check(preds: &[f64], labels: usize) -> Result<(), MetricError> {
    if preds.len() != labels {
        return Err(MetricError::Length {
            preds: preds.len(),
            labels,
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Fraction of `(p >= 0.5) == label`.
pub fn accuracy(preds: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(preds, labels.len())?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= 0.5) == y)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Root mean squared error of probabilities against 0/1 labels.
pub fn rmse(preds: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(preds, labels.len())?;
    let sq: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let e = p - if y { 1.0 } else { 0.0 };
            e * e
        })
        .sum();
    Ok((sq / preds.len() as f64).sqrt())
}

/// Mann-Whitney AUC over all positive/negative pairs, ties counting one half.
pub fn auc(preds: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(preds, labels.len())?;
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    // Midranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]] == preds[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1-based rank of the positive among its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankResult(pub usize);

/// `1/log2(rank + 1)` inside the top `k`, else 0.
pub fn ndcg_at_k(rank: RankResult, k: usize) -> f64 {
    if rank.0 == 0 || rank.0 > k {
        return 0.0;
    }
    1.0 / ((rank.0 + 1) as f64).log2()
}

/// Rank of `scores[positive]`; negatives tying the positive rank above it.
pub fn rank_candidates(scores: &[f64], positive: usize) -> Result<RankResult, MetricError> {
    if positive >= scores.len() {
        return Err(MetricError::Index {
            index: positive,
            len: scores.len(),
        });
    }
    let s = scores[positive];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| i != positive && x >= s)
        .count();
    Ok(RankResult(1 + above))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiag {
    /// Agreement with the truth under the better of the two cluster labelings.
    pub purity: f64,
    pub sizes: [usize; 2],
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
}

const RESTARTS: usize = 20;
const MAX_ITERS: usize = 100;

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// 2-means over the rows of `embeddings` (the first `truth.len()` rows), best
/// of 20 seeded restarts by inertia, scored against the hidden truth values.
pub fn cluster_variables(embeddings: &Array2<f64>, truth: &Assignment, seed: u64) -> Result<ClusterDiag, MetricError> {
    let n = truth.len();
    if n < 2 || embeddings.nrows() < n {
        return Err(MetricError::Cluster(format!(
            "at least 2 variables with embeddings (have {} truth values, {} rows)",
            n,
            embeddings.nrows()
        )));
    }
    let truths: Vec<bool> = truth.values.clone();
    if truths.iter().all(|&t| t) || truths.iter().all(|&t| !t) {
        return Err(MetricError::Cluster("both truth values present".into()));
    }
    let x = embeddings.slice(ndarray::s![..n, ..]);
    let mut rng = Rng::new(seed, Stream::Cluster);
    let mut best: Option<(f64, Vec<u8>, usize)> = None;
    for _ in 0..RESTARTS {
        let init = rng.sample_distinct(n, 2);
        let mut centers = [x.row(init[0]).to_owned(), x.row(init[1]).to_owned()];
        let mut assign = vec![u8::MAX; n];
        let mut iters = 0;
        for it in 1..=MAX_ITERS {
            iters = it;
            let mut changed = false;
            for (i, slot) in assign.iter_mut().enumerate() {
                let c = u8::from(dist2(x.row(i), centers[1].view()) < dist2(x.row(i), centers[0].view()));
                if *slot != c {
                    *slot = c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (k, center) in centers.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] as usize == k).collect();
                if members.is_empty() {
                    continue;
                }
                center.fill(0.0);
                for &i in &members {
                    *center += &x.row(i);
                }
                *center /= members.len() as f64;
            }
        }
        let inertia: f64 = (0..n)
            .map(|i| dist2(x.row(i), centers[assign[i] as usize].view()))
            .sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, assign, iters));
        }
    }
    let (_, assign, iterations) = best.expect("at least one restart");
    let agree = (0..n).filter(|&i| (assign[i] == 1) == truths[i]).count();
    let purity = agree.max(n - agree) as f64 / n as f64;
    let ones = assign.iter().filter(|&&a| a == 1).count();
    Ok(ClusterDiag {
        purity,
        sizes: [n - ones, ones],
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0.9, 0.2], &[true, true]).unwrap(), 0.5);
        assert_eq!(accuracy(&[0.5], &[true]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.7, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(accuracy(&[], &[]), Err(MetricError::Empty));
        assert!(matches!(accuracy(&[0.1], &[]), Err(MetricError::Length { .. })));
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.5; 4], &[true, false, true, true]).unwrap(), 0.5);
        assert!((rmse(&[0.9, 0.2], &[true, true]).unwrap() - 0.325f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.1, 0.8], &[true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.2, 0.8], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.2, 0.8], &[true, true]), Err(MetricError::SingleClass));
    }

    #[test]
    fn auc_matches_pair_count() {
        let mut rng = Rng::new(5, Stream::DataGen);
        let preds: Vec<f64> = (0..200).map(|_| (rng.uniform() * 10.0).floor() / 10.0).collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.coin()).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += match preds[i].total_cmp(&preds[j]) {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        assert!((auc(&preds, &labels).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg_at_k(RankResult(1), 10), 1.0);
        assert!((ndcg_at_k(RankResult(4), 10) - 0.4307).abs() < 1e-4);
        assert_eq!(ndcg_at_k(RankResult(15), 10), 0.0);
    }

    #[test]
    fn rank_cases() {
        let mut s = vec![0.1; 101];
        s[7] = 0.9;
        assert_eq!(rank_candidates(&s, 7).unwrap(), RankResult(1));
        s[3] = 0.9;
        assert_eq!(rank_candidates(&s, 7).unwrap(), RankResult(2));
        let mut low = vec![0.5; 101];
        low[0] = 0.0;
        assert_eq!(rank_candidates(&low, 0).unwrap(), RankResult(101));
        assert!(rank_candidates(&low, 101).is_err());
    }

    #[test]
    fn rank_ignores_candidate_order() {
        let mut rng = Rng::new(9, Stream::DataGen);
        let scores: Vec<f64> = (0..101).map(|_| (rng.uniform() * 20.0).round()).collect();
        let r = rank_candidates(&scores, 0).unwrap();
        for _ in 0..20 {
            let mut idx: Vec<usize> = (0..101).collect();
            rng.shuffle(&mut idx);
            let permuted: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let pos = idx.iter().position(|&i| i == 0).unwrap();
            assert_eq!(rank_candidates(&permuted, pos).unwrap(), r);
        }
    }

    #[test]
    fn rank_metrics_survive_monotone_transforms() {
        let preds = [0.9, 0.3, 0.6, 0.2, 0.55];
        let labels = [true, false, true, false, false];
        let sq: Vec<f64> = preds.iter().map(|p| p * p).collect();
        assert_eq!(auc(&preds, &labels).unwrap(), auc(&sq, &labels).unwrap());
        assert_eq!(rank_candidates(&preds, 2).unwrap(), rank_candidates(&sq, 2).unwrap());
        assert_ne!(rmse(&preds, &labels).unwrap(), rmse(&sq, &labels).unwrap());
    }

    fn blobs(n: usize, sep: f64, seed: u64) -> (Array2<f64>, Assignment) {
        let mut rng = Rng::new(seed, Stream::DataGen);
        let truth: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = Array2::from_shape_fn((n, 8), |(i, _)| {
            rng.normal() + if truth[i] { sep } else { -sep }
        });
        (x, Assignment::new(truth))
    }

    #[test]
    fn separated_blobs_are_pure() {
        let (x, t) = blobs(200, 10.0, 1);
        let diag = cluster_variables(&x, &t, 1).unwrap();
        assert_eq!(diag.purity, 1.0);
        assert_eq!(diag.sizes, [100, 100]);
    }

    #[test]
    fn random_embeddings_give_chance_purity() {
        let (x, t) = blobs(1000, 0.0, 2);
        let diag = cluster_variables(&x, &t, 2).unwrap();
        assert!(diag.purity >= 0.5 && diag.purity < 0.55, "{}", diag.purity);
    }

    #[test]
    fn single_truth_value_is_an_error() {
        let x = Array2::zeros((3, 2));
        let t = Assignment::new(vec![true; 3]);
        assert!(cluster_variables(&x, &t, 0).is_err());
    }
}
