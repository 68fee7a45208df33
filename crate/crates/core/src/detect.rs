//! Threshold detection of adversarial inputs from uncertainty scores.
//!
//! Higher scores are treated as more adversarial; the positive class is
//! "adversarial".

use alloc::{format, string::String, vec::Vec};

use crate::uncertainty::Metric;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub metric: Metric,
    pub threshold: f64,
    pub calibration_quantile: f64,
}

impl DetectorConfig {
    /// Threshold at the `quantile` of clean-set scores.
    pub fn calibrated(metric: Metric, clean_scores: &[f64], quantile: f64) -> Result<Self> {
        Ok(Self {
            metric,
            threshold: calibrate(clean_scores, quantile)?,
            calibration_quantile: quantile,
        })
    }

    /// Flags `value` as adversarial when it exceeds the threshold.
    pub fn is_adversarial(&self, value: f64) -> bool {
        value > self.threshold
    }
}

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Precondition(format!("{what} scores are empty")));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Precondition(format!("{what} scores contain NaN")));
    }
    Ok(())
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `q·(n-1)` in the sorted scores).
pub fn calibrate(scores: &[f64], quantile: f64) -> Result<f64> {
    check_scores(scores, "calibration")?;
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Precondition(format!("quantile {quantile} is not in (0, 1)")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = quantile * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called adversarial at this point.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocReport {
    /// Sorted by false-positive rate, from `(0, 0)` to `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve sweeping every distinct score as a threshold. The trapezoidal
/// AUC equals `P(attack > clean) + P(tie) / 2`.
pub fn roc(clean_scores: &[f64], attack_scores: &[f64]) -> Result<RocReport> {
    check_scores(clean_scores, "clean")?;
    check_scores(attack_scores, "attack")?;
    let mut all: Vec<(f64, bool)> = clean_scores
        .iter()
        .map(|&s| (s, false))
        .chain(attack_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_neg = clean_scores.len() as f64;
    let n_pos = attack_scores.len() as f64;
    let mut points = Vec::with_capacity(all.len() + 1);
    points.push(RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
            threshold: t,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocReport { points, auc })
}

/// CSV rendering of the curve (`fpr,tpr,threshold`).
pub fn roc_csv(report: &RocReport) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &report.points {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    out
}
