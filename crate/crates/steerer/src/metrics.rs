//! Counting metrics, local-maxima localization and instance-level
//! precision/recall/F1 under one-to-one point matching.

use crate::densitymap::{DensityMap, Point, PointSet};
use crate::error::{Error, Result};

/// Count estimate: total mass of the map, accumulated in row-major order.
pub fn count_from_density(d: &DensityMap) -> f64 {
    let mut acc = 0.0;
    for &v in &d.data {
        acc += v;
    }
    acc
}

/// How the match radius is chosen for each ground-truth point.
#[derive(Clone, Copy, Debug)]
pub enum MatchSigma {
    /// One radius for every point.
    Uniform(f64),
    /// Each ground-truth point's own radius, clamped from below; points
    /// without a radius fall back to the clamp.
    PerPointRadius { min: f64 },
}

impl MatchSigma {
    fn for_point(&self, p: &Point) -> f64 {
        match *self {
            MatchSigma::Uniform(s) => s,
            MatchSigma::PerPointRadius { min } => p.radius.unwrap_or(min).max(min),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPair {
    pub pred_index: usize,
    pub gt_index: usize,
    pub distance: f64,
}

/// One-to-one matching outcome: tp + fn = |gt|, tp + fp = |pred|.
#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub pairs: Vec<MatchedPair>,
}

/// Greedy one-to-one matching over candidate pairs sorted by ascending
/// distance (ties by prediction index, then ground-truth index). A pair is
/// accepted iff its distance is within the ground-truth point's radius and
/// both endpoints are still unmatched.
pub fn match_points(pred: &PointSet, gt: &PointSet, sigma: MatchSigma) -> Result<MatchResult> {
    if let MatchSigma::Uniform(s) = sigma {
        if s <= 0.0 {
            return Err(Error::invalid(
                "match_points",
                format!("sigma must be positive, got {s}"),
            ));
        }
    }
    let mut candidates: Vec<MatchedPair> = Vec::new();
    for (i, pp) in pred.points.iter().enumerate() {
        for (k, gp) in gt.points.iter().enumerate() {
            let d = ((pp.x - gp.x).powi(2) + (pp.y - gp.y).powi(2)).sqrt();
            if d <= sigma.for_point(gp) {
                candidates.push(MatchedPair {
                    pred_index: i,
                    gt_index: k,
                    distance: d,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then(a.pred_index.cmp(&b.pred_index))
            .then(a.gt_index.cmp(&b.gt_index))
    });

    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for cand in candidates {
        if !pred_used[cand.pred_index] && !gt_used[cand.gt_index] {
            pred_used[cand.pred_index] = true;
            gt_used[cand.gt_index] = true;
            pairs.push(cand);
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        true_positives: tp,
        false_positives: pred.len() - tp,
        false_negatives: gt.len() - tp,
        pairs,
    })
}

/// Precision, recall, F1 with the 0/0 -> 0 convention.
pub fn prf(m: &MatchResult) -> (f64, f64, f64) {
    let tp = m.true_positives as f64;
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let p = ratio(tp, tp + m.false_positives as f64);
    let r = ratio(tp, tp + m.false_negatives as f64);
    let f1 = ratio(2.0 * p * r, p + r);
    (p, r, f1)
}

/// Strict local maxima above a threshold, mapped to image coordinates.
///
/// A cell is a detection iff its value exceeds `threshold` and it beats every
/// other cell of its centered window, with equal values resolved in favor of
/// the smaller row-major index. Detection coordinates are the image-space
/// centers of their cells: stride*c + (stride-1)/2.
pub fn extract_maxima(d: &DensityMap, threshold: f64, window: usize) -> Result<PointSet> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(
            "extract_maxima",
            format!("window must be odd and >= 3, got {window}"),
        ));
    }
    if threshold <= 0.0 {
        return Err(Error::invalid(
            "extract_maxima",
            format!("threshold must be positive, got {threshold}"),
        ));
    }
    let half = (window / 2) as isize;
    let stride = d.stride() as f64;
    let offset = (stride - 1.0) / 2.0;
    let mut points = Vec::new();
    for r in 0..d.h as isize {
        for c in 0..d.w as isize {
            let v = d.at(r as usize, c as usize);
            if v <= threshold {
                continue;
            }
            let mut is_peak = true;
            'scan: for dr in -half..=half {
                for dc in -half..=half {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= d.h as isize || cc >= d.w as isize {
                        continue;
                    }
                    let o = d.at(rr as usize, cc as usize);
                    let loses = o > v
                        || (o == v && (rr, cc) < (r, c));
                    if loses {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                points.push(Point::new(
                    stride * c as f64 + offset,
                    stride * r as f64 + offset,
                ));
            }
        }
    }
    Ok(PointSet::new(points))
}

/// (MAE, root-mean-square error, count-normalized absolute error) over
/// per-image (predicted, ground-truth) count pairs.
pub fn counting_metrics(pairs: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("counting_metrics"));
    }
    let n = pairs.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut nae = 0.0;
    for &(pred, gt) in pairs {
        let d = (pred - gt).abs();
        abs += d;
        sq += d * d;
        nae += d / gt.max(1.0);
    }
    Ok((abs / n, (sq / n).sqrt(), nae / n))
}
