//! Classification metrics with pilot as the positive class.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("AUC needs at least one positive and one negative sample")]
    SingleClass,
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples")]
    Empty,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// A score at or above `threshold` predicts pilot.
    pub fn at_threshold(scores: &[f64], positives: &[bool], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &p) in scores.iter().zip(positives) {
            match (s >= threshold, p) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// Absent when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    /// Count-based metrics; precision/recall/F1 are 0 when undefined.
    pub fn from_counts(counts: ConfusionCounts, auc: Option<f64>) -> Self {
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            acc: ratio(counts.tp + counts.tn, counts.total()),
            auc,
            precision,
            recall,
            f1,
            counts,
        }
    }

    pub fn compute(scores: &[f64], positives: &[bool], threshold: f64) -> Result<Self, MetricsError> {
        if scores.len() != positives.len() {
            return Err(MetricsError::LengthMismatch {
                scores: scores.len(),
                labels: positives.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricsError::Empty);
        }
        let counts = ConfusionCounts::at_threshold(scores, positives, threshold);
        Ok(Self::from_counts(counts, compute_auc(scores, positives).ok()))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let auc = self.auc.map_or("n/a".to_string(), |a| format!("{:.4}", a));
        writeln!(f, "metric     value")?;
        writeln!(f, "acc        {:.4}", self.acc)?;
        writeln!(f, "auc        {auc}")?;
        writeln!(f, "precision  {:.4}", self.precision)?;
        writeln!(f, "recall     {:.4}", self.recall)?;
        writeln!(f, "f1         {:.4}", self.f1)?;
        write!(
            f,
            "counts     tp={} fp={} tn={} fn={}",
            self.counts.tp, self.counts.fp, self.counts.tn, self.counts.fn_
        )
    }
}

/// Mann–Whitney AUC from mid-ranks: ties between a positive and a
/// negative count half a win.
pub fn compute_auc(scores: &[f64], positives: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != positives.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: positives.len(),
        });
    }
    let p = positives.iter().filter(|&&x| x).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positives[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// threshold in descending order.
pub fn roc_curve(scores: &[f64], positives: &[bool]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let p = positives.iter().filter(|&&x| x).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (idx, &k) in order.iter().enumerate() {
        if positives[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(idx + 1).is_none_or(|&next| scores[next] != scores[k]);
        if last_of_tie {
            points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        }
    }
    Ok(points)
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}
