//! ROC/AUC, F-measure and residual summaries.
//!
//! The scoring unit is one `(flow, measurement time)` cell; a cell's score is
//! the magnitude of the sparse estimate produced at the slice whose newest
//! column is that time. Warm-up times before the first slice are not scored.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::StepResult;
use crate::traffic::Labels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Ordered by decreasing threshold. A cell is positive when its score
    /// strictly exceeds the threshold, the same rule the detector uses.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps every distinct score as a threshold, plus `-inf` for the `(1, 1)`
/// end point. AUC by the trapezoid rule.
pub fn roc(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Parameter("scores contain NaN".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 {
        return Err(Error::DegenerateTruth("no positive labels".into()));
    }
    if neg == 0 {
        return Err(Error::DegenerateTruth("no negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    // at threshold = score[order[i]], exactly the cells above it are positive
    while i < order.len() {
        let thr = scores[order[i]];
        points.push(RocPoint {
            threshold: thr,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
        while i < order.len() && scores[order[i]] == thr {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        tpr: 1.0,
        fpr: 1.0,
    });
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Per-cell scores over measurement times `first_time ..= first_time + n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub first_time: usize,
    /// `F x n` magnitudes.
    pub scores: DMatrix<f64>,
}

impl ScoreGrid {
    /// `|z|` of each step, which must cover consecutive measurement times.
    pub fn from_steps(results: &[StepResult]) -> Result<Self> {
        let first = results
            .first()
            .ok_or_else(|| Error::Parameter("no step results".into()))?;
        let flows = first.anomaly.len();
        let mut scores = DMatrix::zeros(flows, results.len());
        for (j, r) in results.iter().enumerate() {
            if r.measurement_time != first.measurement_time + j || r.anomaly.len() != flows {
                return Err(Error::Dimension(format!(
                    "step {j} is not aligned with the first step's grid"
                )));
            }
            scores.set_column(j, &r.anomaly.estimate().abs());
        }
        Ok(Self {
            first_time: first.measurement_time,
            scores,
        })
    }

    pub fn times(&self) -> std::ops::Range<usize> {
        self.first_time..self.first_time + self.scores.ncols()
    }

    /// Column-major flat scores with matching truth flags.
    pub fn flatten(&self, truth: &Labels) -> (Vec<f64>, Vec<bool>) {
        let mut s = Vec::with_capacity(self.scores.len());
        let mut y = Vec::with_capacity(self.scores.len());
        for (j, time) in self.times().enumerate() {
            for f in 0..self.scores.nrows() {
                s.push(self.scores[(f, j)]);
                y.push(truth.contains(&(f, time)));
            }
        }
        (s, y)
    }

    pub fn roc(&self, truth: &Labels) -> Result<RocCurve> {
        let (s, y) = self.flatten(truth);
        roc(&s, &y)
    }

    /// Cells flagged at a fixed threshold, grouped by time.
    pub fn flagged(&self, threshold: f64) -> Vec<BTreeSet<usize>> {
        (0..self.scores.ncols())
            .map(|j| {
                (0..self.scores.nrows())
                    .filter(|&f| self.scores[(f, j)] > threshold)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, flagged: usize, actual: usize) -> Self {
        let precision = if flagged == 0 { 0.0 } else { tp as f64 / flagged as f64 };
        let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FTrace {
    /// `(time, scores)` per scored time.
    pub per_time: Vec<(usize, Prf)>,
    /// Pooled over all cells.
    pub overall: Prf,
}

/// Precision/recall/F1 per time, with `flagged[j]` belonging to
/// `first_time + j`.
pub fn f_measure(flagged: &[BTreeSet<usize>], truth: &Labels, first_time: usize) -> FTrace {
    let mut by_time: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(f, t) in truth {
        by_time.entry(t).or_default().insert(f);
    }
    let empty = BTreeSet::new();
    let (mut tp_all, mut flag_all, mut act_all) = (0, 0, 0);
    let per_time = flagged
        .iter()
        .enumerate()
        .map(|(j, flags)| {
            let time = first_time + j;
            let actual = by_time.get(&time).unwrap_or(&empty);
            let tp = flags.intersection(actual).count();
            tp_all += tp;
            flag_all += flags.len();
            act_all += actual.len();
            (time, Prf::from_counts(tp, flags.len(), actual.len()))
        })
        .collect();
    FTrace {
        per_time,
        overall: Prf::from_counts(tp_all, flag_all, act_all),
    }
}

/// Pooled F1 at each threshold, in parallel.
pub fn f1_curve(grid: &ScoreGrid, truth: &Labels, thresholds: &[f64]) -> Vec<(f64, Prf)> {
    thresholds
        .par_iter()
        .map(|&thr| (thr, f_measure(&grid.flagged(thr), truth, grid.first_time).overall))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub series: Vec<f64>,
    /// Median over the last quarter of steps (at least one step).
    pub tail_median: f64,
}

pub fn residual_trace(results: &[StepResult]) -> ResidualSummary {
    let series: Vec<f64> = results.iter().map(|r| r.residual).collect();
    ResidualSummary {
        tail_median: tail_median(&series),
        series,
    }
}

/// Median of the last `ceil(n / 4)` values; NaN for an empty series.
pub fn tail_median(series: &[f64]) -> f64 {
    if series.is_empty() {
        return f64::NAN;
    }
    let take = series.len().div_ceil(4);
    let mut tail = series[series.len() - take..].to_vec();
    tail.sort_by(f64::total_cmp);
    let m = tail.len() / 2;
    if tail.len() % 2 == 1 {
        tail[m]
    } else {
        (tail[m - 1] + tail[m]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scores() {
        let truth = [true, false, true, false, false];
        let scores: Vec<f64> = truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let r = roc(&scores, &truth).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!((r.points[0].fpr, r.points[0].tpr), (0.0, 0.0));
        let last = r.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn constant_scores_give_chance() {
        let truth = [true, false, false, true];
        let r = roc(&[0.3; 4], &truth).unwrap();
        assert_eq!(r.points.len(), 2);
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn degenerate_truth() {
        assert!(matches!(roc(&[1.0, 2.0], &[false, false]), Err(Error::DegenerateTruth(_))));
        assert!(roc(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn roc_is_monotone() {
        let scores = [0.1, 0.9, 0.4, 0.4, 0.7, 0.2];
        let truth = [false, true, true, false, false, true];
        let r = roc(&scores, &truth).unwrap();
        for w in r.points.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].tpr <= w[1].tpr && w[0].fpr <= w[1].fpr);
        }
    }

    #[test]
    fn f1_cases() {
        let truth: Labels = [(0, 5), (1, 5)].into_iter().collect();
        let exact = f_measure(&[BTreeSet::from([0, 1])], &truth, 5);
        assert_eq!(exact.overall.f1, 1.0);
        let none = f_measure(&[BTreeSet::new()], &truth, 5);
        assert_eq!(none.overall.f1, 0.0);
        let half = f_measure(&[BTreeSet::from([0, 2])], &truth, 5);
        assert_eq!(half.overall.precision, 0.5);
        assert_eq!(half.overall.recall, 0.5);
        assert_eq!(half.overall.f1, 0.5);
    }

    #[test]
    fn tail_medians() {
        assert_eq!(tail_median(&[0.1; 100]), 0.1);
        assert_eq!(tail_median(&[9.0, 9.0, 9.0, 1.0, 2.0, 3.0, 4.0, 5.0]), 4.5);
        assert_eq!(tail_median(&[0.0; 7]), 0.0);
    }
}
