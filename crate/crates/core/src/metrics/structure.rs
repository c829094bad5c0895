//! Structure measure and enhanced-alignment measure.

use super::fmeasure::{adaptive_threshold, check_pair};
use crate::error::Result;
use crate::map::Map;

const ALPHA: f64 = 0.5;
const EPS: f64 = f64::EPSILON;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &Map, gt: &Map) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == 1.0 {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let n = pred.len() as f64;
    (fg.len() as f64 * object_score(&fg) + bg.len() as f64 * object_score(&bg)) / n
}

/// Foreground centroid as 1-based `(column, row)` counts, rounded half away
/// from zero.
fn centroid(gt: &Map) -> (usize, usize) {
    let (h, w) = (gt.height(), gt.width());
    let total = gt.count_positive() as f64;
    if total == 0.0 {
        return (((w as f64) / 2.0).round() as usize, ((h as f64) / 2.0).round() as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt.get(y, x) == 1.0 {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let mut sx2 = 0.0;
    let mut sy2 = 0.0;
    let mut sxy = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sx2 += (p - x) * (p - x);
        sy2 += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let d = n - 1.0 + EPS;
    let (sx2, sy2, sxy) = (sx2 / d, sy2 / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block(m: &Map, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for y in rows {
        for x in cols.clone() {
            out.push(m.get(y, x));
        }
    }
    out
}

fn s_region(pred: &Map, gt: &Map) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let (cx, cy) = centroid(gt);
    let quadrants = [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)];
    let mut acc = 0.0;
    for (rows, cols) in quadrants {
        let area = rows.len() * cols.len();
        if area == 0 {
            continue;
        }
        acc += area as f64 * ssim(&block(pred, rows.clone(), cols.clone()), &block(gt, rows, cols));
    }
    acc / (h * w) as f64
}

/// Structure measure of one image.
pub fn image_s_measure(pred: &Map, gt: &Map) -> Result<f64> {
    check_pair(pred, gt)?;
    let y = gt.mean();
    Ok(if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        (ALPHA * s_object(pred, gt) + (1.0 - ALPHA) * s_region(pred, gt)).max(0.0)
    })
}

/// Enhanced-alignment measure of one image, with the prediction binarised
/// at its adaptive threshold.
pub fn image_e_measure(pred: &Map, gt: &Map) -> Result<f64> {
    check_pair(pred, gt)?;
    let th = adaptive_threshold(pred);
    let fm: Vec<f64> = pred.data().iter().map(|&p| if p >= th { 1.0 } else { 0.0 }).collect();
    let g = gt.data();
    let n = g.len() as f64;
    let positives = gt.count_positive();
    let enhanced: Vec<f64> = if positives == 0 {
        fm.iter().map(|v| 1.0 - v).collect()
    } else if positives == g.len() {
        fm
    } else {
        let mu_fm = fm.iter().sum::<f64>() / n;
        let mu_gt = g.iter().sum::<f64>() / n;
        fm.iter()
            .zip(g)
            .map(|(f, g)| {
                let (a, b) = (f - mu_fm, g - mu_gt);
                let align = 2.0 * (b * a) / (b * b + a * a + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    Ok(enhanced.iter().sum::<f64>() / n)
}
