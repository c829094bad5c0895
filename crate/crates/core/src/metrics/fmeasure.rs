//! Precision-recall curves, F-measure family and MAE.

use crate::error::{Error, Result};
use crate::map::Map;

pub const NUM_THRESHOLDS: usize = 256;
/// `β²` of the F-measure.
pub const BETA2: f64 = 0.3;

/// Threshold `t` of the curve. A pixel is positive when `pred >= threshold(t)`.
/// The half-step offset keeps 0 below every threshold and 1 above every
/// threshold, so a binary map binarises to itself at all 256 levels.
pub fn threshold(t: usize) -> f64 {
    (t as f64 + 0.5) / NUM_THRESHOLDS as f64
}

/// Number of thresholds `p` clears, in `0..=256`.
fn levels_passed(p: f64) -> usize {
    let mut k = ((p * NUM_THRESHOLDS as f64 - 0.5).floor() + 1.0).clamp(0.0, NUM_THRESHOLDS as f64) as usize;
    while k > 0 && p < threshold(k - 1) {
        k -= 1;
    }
    while k < NUM_THRESHOLDS && p >= threshold(k) {
        k += 1;
    }
    k
}

pub(crate) fn check_pair(pred: &Map, gt: &Map) -> Result<()> {
    if !pred.same_size(gt) {
        return Err(Error::shape(
            "metric",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    if pred.is_empty() {
        return Err(Error::shape("metric", "empty map"));
    }
    if !gt.is_binary() {
        return Err(Error::Contract("ground truth must be binary".into()));
    }
    if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("predictions must lie in [0, 1]".into()));
    }
    Ok(())
}

/// True-positive, false-positive and false-negative counts per threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Counts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl Counts {
    fn zeros() -> Self {
        Self {
            tp: vec![0; NUM_THRESHOLDS],
            fp: vec![0; NUM_THRESHOLDS],
            fn_: vec![0; NUM_THRESHOLDS],
        }
    }

    fn merge(&mut self, other: &Counts) {
        for t in 0..NUM_THRESHOLDS {
            self.tp[t] += other.tp[t];
            self.fp[t] += other.fp[t];
            self.fn_[t] += other.fn_[t];
        }
    }

    /// `(precision, recall)` per threshold.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        (0..NUM_THRESHOLDS)
            .map(|t| {
                let (tp, fp, fn_) = (self.tp[t] as f64, self.fp[t] as f64, self.fn_[t] as f64);
                let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
                let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
                (precision, recall)
            })
            .collect()
    }
}

/// Per-threshold counts for one image.
pub fn image_counts(pred: &Map, gt: &Map) -> Result<Counts> {
    check_pair(pred, gt)?;
    let mut pos_hist = [0u64; NUM_THRESHOLDS + 1];
    let mut neg_hist = [0u64; NUM_THRESHOLDS + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let k = levels_passed(p);
        if g == 1.0 {
            pos_hist[k] += 1;
        } else {
            neg_hist[k] += 1;
        }
    }
    let positives: u64 = pos_hist.iter().sum();
    let mut c = Counts::zeros();
    // A pixel passing k levels is positive at thresholds 0..k.
    let (mut tp, mut fp) = (0, 0);
    for t in (0..NUM_THRESHOLDS).rev() {
        tp += pos_hist[t + 1];
        fp += neg_hist[t + 1];
        c.tp[t] = tp;
        c.fp[t] = fp;
        c.fn_[t] = positives - tp;
    }
    Ok(c)
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

/// How per-image counts are combined into one curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrAggregation {
    /// Sum TP/FP/FN over the dataset, then form precision and recall.
    #[default]
    Dataset,
    /// Average per-image precision, recall and F.
    PerImage,
}

/// How `mF` is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanFMode {
    /// Mean of F over the 256-point curve.
    #[default]
    Curve,
    /// Per-image F at the adaptive threshold `min(2·mean(pred), 1)`, averaged.
    Adaptive,
}

/// A PR curve with its F values.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
    pub f: Vec<f64>,
}

impl PrCurve {
    pub fn max_f(&self) -> f64 {
        self.f.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_f(&self) -> f64 {
        self.f.iter().sum::<f64>() / self.f.len() as f64
    }
}

/// PR curve over image pairs. Pairs whose ground truth has no foreground
/// must be filtered out by the caller.
pub fn pr_curve(pairs: &[(&Map, &Map)], agg: PrAggregation) -> Result<PrCurve> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no images to build a PR curve from".into()));
    }
    let counts = pairs
        .iter()
        .map(|(p, g)| image_counts(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(match agg {
        PrAggregation::Dataset => {
            let mut total = Counts::zeros();
            counts.iter().for_each(|c| total.merge(c));
            let points = total.curve();
            let f = points.iter().map(|&(p, r)| f_beta(p, r)).collect();
            PrCurve { points, f }
        }
        PrAggregation::PerImage => {
            let n = counts.len() as f64;
            let mut points = vec![(0.0, 0.0); NUM_THRESHOLDS];
            let mut f = vec![0.0; NUM_THRESHOLDS];
            for c in &counts {
                for (t, (p, r)) in c.curve().into_iter().enumerate() {
                    points[t].0 += p;
                    points[t].1 += r;
                    f[t] += f_beta(p, r);
                }
            }
            for t in 0..NUM_THRESHOLDS {
                points[t].0 /= n;
                points[t].1 /= n;
                f[t] /= n;
            }
            PrCurve { points, f }
        }
    })
}

/// `min(2·mean(pred), 1)`.
pub fn adaptive_threshold(pred: &Map) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

/// F at the adaptive threshold for one image.
pub fn adaptive_f(pred: &Map, gt: &Map) -> Result<f64> {
    check_pair(pred, gt)?;
    let th = adaptive_threshold(pred);
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= th, g == 1.0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
    let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    Ok(f_beta(precision, recall))
}

pub fn mean_f(pairs: &[(&Map, &Map)], mode: MeanFMode, agg: PrAggregation) -> Result<f64> {
    match mode {
        MeanFMode::Curve => Ok(pr_curve(pairs, agg)?.mean_f()),
        MeanFMode::Adaptive => {
            if pairs.is_empty() {
                return Err(Error::Dataset("no images to average over".into()));
            }
            let mut sum = 0.0;
            for (p, g) in pairs {
                sum += adaptive_f(p, g)?;
            }
            Ok(sum / pairs.len() as f64)
        }
    }
}

/// Mean absolute error of one image.
pub fn image_mae(pred: &Map, gt: &Map) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean over images of the per-image MAE.
pub fn mae(pairs: &[(&Map, &Map)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no images to average over".into()));
    }
    let mut sum = 0.0;
    for (p, g) in pairs {
        sum += image_mae(p, g)?;
    }
    Ok(sum / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_levels() {
        assert_eq!(levels_passed(0.0), 0);
        assert_eq!(levels_passed(1.0), 256);
        for k in 0..=255u32 {
            let p = k as f64 / 255.0;
            let brute = (0..NUM_THRESHOLDS).filter(|&t| p >= threshold(t)).count();
            assert_eq!(levels_passed(p), brute, "k={k}");
        }
    }

    #[test]
    fn f_values() {
        assert_eq!(f_beta(1.0, 0.0), 0.0);
        assert!((f_beta(0.37, 0.37) - 0.37).abs() < 1e-15);
        assert!((f_beta(0.8, 0.5) - 0.52 / 0.74).abs() < 1e-12);
    }

    #[test]
    fn all_positive_predictor() {
        let gt = Map::from_fn(4, 4, |y, _| (y == 0) as u8 as f64);
        let pred = Map::filled(4, 4, 1.0);
        let c = pr_curve(&[(&pred, &gt)], PrAggregation::Dataset).unwrap();
        assert!(c.points.iter().all(|&(p, r)| p == 0.25 && r == 1.0));
    }

    #[test]
    fn mae_values() {
        let z = Map::filled(3, 3, 0.0);
        assert_eq!(image_mae(&Map::filled(3, 3, 0.25), &z).unwrap(), 0.25);
        assert_eq!(image_mae(&Map::filled(3, 3, 1.0), &z).unwrap(), 1.0);
    }
}
