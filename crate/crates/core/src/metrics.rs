//! Classification metrics.
//!
//! Generic over the number type so they can be evaluated in exact
//! arithmetic (e.g. `num_rational::Ratio<i64>`) as well as in `f64`.

use std::cmp::Ordering;

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait MetricScalar: Num + FromPrimitive + PartialOrd + Clone {}

impl<T: Num + FromPrimitive + PartialOrd + Clone> MetricScalar for T {}

fn count<T: MetricScalar>(n: usize) -> T {
    T::from_u64(n as u64).expect("count representable")
}

fn check_inputs<T: MetricScalar>(scores: &[T], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "metric inputs",
            expected: vec![labels.len()],
            actual: vec![scores.len()],
        });
    }
    if scores.iter().any(|s| s.partial_cmp(s).is_none()) {
        return Err(Error::NonFinite("metric scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassMetric);
    }
    Ok((pos, neg))
}

/// Index ranges of equal-score groups, highest score first.
fn descending_groups<T: MetricScalar>(scores: &[T]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut groups = Vec::new();
    let mut start = 0;
    for k in 1..=order.len() {
        if k == order.len() || scores[order[k]] != scores[order[start]] {
            groups.push((start, k));
            start = k;
        }
    }
    (order, groups)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc<T: MetricScalar>(scores: &[T], labels: &[bool]) -> Result<T> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let (order, groups) = descending_groups(scores);
    // Walk from the top; a positive beats every negative in lower groups.
    let mut negatives_above = 0usize;
    let mut twice_wins = 0u64;
    for (start, end) in groups {
        let p = order[start..end].iter().filter(|&&i| labels[i]).count();
        let q = (end - start) - p;
        twice_wins += 2 * (p as u64) * ((neg - negatives_above - q) as u64) + (p as u64) * (q as u64);
        negatives_above += q;
    }
    let two = count::<T>(2);
    Ok(T::from_u64(twice_wins).expect("count representable") / (two * count::<T>(pos) * count::<T>(neg)))
}

/// Step-wise area under the precision/recall curve,
/// `Σ_k (R_k − R_{k−1})·P_k`, one step per distinct score (tied samples
/// enter together, so the result does not depend on input order).
pub fn average_precision<T: MetricScalar>(scores: &[T], labels: &[bool]) -> Result<T> {
    let (pos, _) = check_inputs(scores, labels)?;
    let (order, groups) = descending_groups(scores);
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = T::zero();
    for (start, end) in groups {
        let p = order[start..end].iter().filter(|&&i| labels[i]).count();
        seen += end - start;
        if p == 0 {
            continue;
        }
        tp += p;
        // (R_k − R_{k−1}) · P_k = (p / pos) · (tp / seen)
        ap = ap + count::<T>(p * tp) / (count::<T>(pos) * count::<T>(seen));
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[bool], labels: &[bool]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Shape {
                op: "confusion",
                expected: vec![labels.len()],
                actual: vec![predictions.len()],
            });
        }
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    fn ratio<T: MetricScalar>(num: usize, den: usize) -> T {
        if den == 0 {
            T::zero()
        } else {
            count::<T>(num) / count::<T>(den)
        }
    }

    pub fn precision<T: MetricScalar>(&self) -> T {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall<T: MetricScalar>(&self) -> T {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR/(P+R)`, or 0 when `P + R = 0`.
    pub fn f_score<T: MetricScalar>(&self) -> T {
        let (p, r): (T, T) = (self.precision(), self.recall());
        let sum = p.clone() + r.clone();
        if sum == T::zero() {
            T::zero()
        } else {
            count::<T>(2) * p * r / sum
        }
    }
}

pub fn precision_recall_f1<T: MetricScalar>(predictions: &[bool], labels: &[bool]) -> Result<(T, T, T)> {
    let c = Confusion::from_predictions(predictions, labels)?;
    Ok((c.precision(), c.recall(), c.f_score()))
}
