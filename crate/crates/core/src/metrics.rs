//! AUC against binarized ground truth, L2 distances and average precision.

use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::geometry::{containing_pixel, Point};

/// Positive pixels: within `radius` pixels (index distance) of the pixel
/// containing any ground-truth point.
pub fn binarize_gt(points: &[Point], h: usize, w: usize, radius: f64) -> Vec<bool> {
    let centers: Vec<(usize, usize)> = points.iter().map(|&p| containing_pixel(p, h, w)).collect();
    let r2 = radius * radius;
    (0..h * w)
        .map(|idx| {
            let (i, j) = ((idx / w) as f64, (idx % w) as f64);
            centers.iter().any(|&(ci, cj)| {
                let (di, dj) = (i - ci as f64, j - cj as f64);
                di * di + dj * dj <= r2
            })
        })
        .collect()
}

/// ROC AUC of `scores` against binary `labels`, sweeping every distinct
/// score as a threshold and integrating with the trapezoid rule.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GazeError::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GazeError::Metric(
            "ground-truth mask is all positive or all negative; ROC undefined".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid between consecutive ROC points
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// AUC of a predicted `h × w` heatmap against the binarized ground truth.
pub fn auc_score(pred: &[f64], h: usize, w: usize, gt_points: &[Point], radius: f64) -> Result<f64> {
    if gt_points.is_empty() {
        return Err(GazeError::Metric("AUC needs at least one ground-truth point".into()));
    }
    roc_auc(pred, &binarize_gt(gt_points, h, w, radius))
}

/// Minimum and average Euclidean distance from the prediction to the
/// ground-truth points.
pub fn distance_scores(pred: Point, gt_points: &[Point]) -> Result<(f64, f64)> {
    if gt_points.is_empty() {
        return Err(GazeError::Metric("distance needs at least one ground-truth point".into()));
    }
    let d: Vec<f64> = gt_points
        .iter()
        .map(|g| (pred[0] - g[0]).hypot(pred[1] - g[1]))
        .collect();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let avg = d.iter().sum::<f64>() / d.len() as f64;
    Ok((min, avg))
}

/// Step-interpolated average precision: mean precision at the rank of each
/// positive, ranking by descending score with ties kept in input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GazeError::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(GazeError::Metric("average precision needs a positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Metrics of one evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub in_frame: bool,
    /// `None` for out-of-frame samples and for undefined ROC curves.
    pub auc: Option<f64>,
    pub min_dist: Option<f64>,
    pub avg_dist: Option<f64>,
    /// In/out probability when the head is enabled.
    pub inout_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub avg_dist: Option<f64>,
    pub min_dist: Option<f64>,
    pub ap: Option<f64>,
    pub n_samples: usize,
    pub n_in_frame: usize,
    /// In-frame samples left out of the AUC mean (undefined ROC).
    pub n_auc_excluded: usize,
}

impl MetricsReport {
    /// `(auc, min_dist, avg_dist)`; an error when no sample was in frame.
    pub fn localization(&self) -> Result<(f64, f64, f64)> {
        match (self.auc, self.min_dist, self.avg_dist) {
            (Some(a), Some(m), Some(d)) => Ok((a, m, d)),
            _ => Err(GazeError::Metric("no in-frame samples to localize".into())),
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// AUC and distances over in-frame samples; AP over all samples that carry
/// an in/out score.
pub fn aggregate(samples: &[SampleMetrics]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(GazeError::Metric("empty evaluation set".into()));
    }
    let inside: Vec<&SampleMetrics> = samples.iter().filter(|s| s.in_frame).collect();
    let auc = mean(inside.iter().filter_map(|s| s.auc));
    let n_auc_excluded = inside.iter().filter(|s| s.auc.is_none()).count();
    let min_dist = mean(inside.iter().filter_map(|s| s.min_dist));
    let avg_dist = mean(inside.iter().filter_map(|s| s.avg_dist));
    let scored: Vec<(f64, bool)> = samples
        .iter()
        .filter_map(|s| s.inout_score.map(|p| (p, s.in_frame)))
        .collect();
    let ap = if scored.is_empty() {
        None
    } else {
        let (scores, labels): (Vec<f64>, Vec<bool>) = scored.into_iter().unzip();
        average_precision(&scores, &labels).ok()
    };
    Ok(MetricsReport {
        auc,
        avg_dist,
        min_dist,
        ap,
        n_samples: samples.len(),
        n_in_frame: inside.len(),
        n_auc_excluded,
    })
}
