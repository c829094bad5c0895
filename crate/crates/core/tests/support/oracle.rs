//! Dense, loop-by-definition reference implementations of the metrics and
//! of binary erosion. Nothing here calls into the metric code under test.

use crace::Map;
use rand::Rng;

const BETA2: f64 = 0.3;
const EPS: f64 = f64::EPSILON;

fn px(m: &Map) -> Vec<f64> {
    m.data().to_vec()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn f_beta(p: f64, r: f64) -> f64 {
    if BETA2 * p + r == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * p * r / (BETA2 * p + r)
    }
}

/// `(precision, recall)` of `pred ≥ th` against `gt`.
pub fn pr_at(pred: &Map, gt: &Map, th: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let on = pred.get(y, x) >= th;
            let fg = gt.get(y, x) == 1.0;
            tp += (on && fg) as u64;
            fp += (on && !fg) as u64;
            fn_ += (!on && fg) as u64;
        }
    }
    let p = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    (p, r)
}

fn thresholds() -> impl Iterator<Item = f64> {
    (0..256).map(|t| (t as f64 + 0.5) / 256.0)
}

/// Curve from counts pooled over all pairs.
pub fn pr_curve_pooled(pairs: &[(Map, Map)]) -> Vec<(f64, f64)> {
    thresholds()
        .map(|th| {
            let (mut tp, mut fp, mut pos) = (0u64, 0u64, 0u64);
            for (p, g) in pairs {
                for (a, b) in px(p).iter().zip(px(g)) {
                    let on = *a >= th;
                    tp += (on && b == 1.0) as u64;
                    fp += (on && b == 0.0) as u64;
                    pos += (b == 1.0) as u64;
                }
            }
            let prec = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let rec = if pos == 0 { 0.0 } else { tp as f64 / pos as f64 };
            (prec, rec)
        })
        .collect()
}

/// `(points, f)` averaged over images at each threshold.
pub fn pr_curve_per_image(pairs: &[(Map, Map)]) -> (Vec<(f64, f64)>, Vec<f64>) {
    let n = pairs.len() as f64;
    thresholds()
        .map(|th| {
            let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
            for (p, g) in pairs {
                let (a, b) = pr_at(p, g, th);
                sp += a;
                sr += b;
                sf += f_beta(a, b);
            }
            ((sp / n, sr / n), sf / n)
        })
        .unzip()
}

pub fn max_f(f: &[f64]) -> f64 {
    f.iter().copied().fold(0.0, f64::max)
}

pub fn adaptive_f(pred: &Map, gt: &Map) -> f64 {
    let th = (2.0 * mean(&px(pred))).min(1.0);
    let (p, r) = pr_at(pred, gt, th);
    f_beta(p, r)
}

pub fn mae(pred: &Map, gt: &Map) -> f64 {
    mean(
        &px(pred)
            .iter()
            .zip(px(gt))
            .map(|(a, b)| (a - b).abs())
            .collect::<Vec<_>>(),
    )
}

/// Weighted F with β² = 1: nearest-foreground propagation of errors, a
/// zero-padded 7×7 Gaussian (σ = 5), and distance-dependent background
/// weights `2 − exp(ln(0.5)/5 · d)`.
pub fn weighted_f(pred: &Map, gt: &Map) -> Option<f64> {
    let (h, w) = (gt.height(), gt.width());
    let fg: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| gt.get(y, x) == 1.0)
        .collect();
    if fg.is_empty() {
        return None;
    }
    let err = |y: usize, x: usize| (pred.get(y, x) - gt.get(y, x)).abs();
    // Nearest foreground pixel: first in row-major order among the closest.
    let nearest = |y: usize, x: usize| -> ((usize, usize), f64) {
        let mut best = fg[0];
        let mut best_d2 = usize::MAX;
        for &(fy, fx) in &fg {
            let d2 = fy.abs_diff(y).pow(2) + fx.abs_diff(x).pow(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = (fy, fx);
            }
        }
        (best, (best_d2 as f64).sqrt())
    };
    let et = |y: usize, x: usize| {
        if gt.get(y, x) == 1.0 {
            err(y, x)
        } else {
            let ((ny, nx), _) = nearest(y, x);
            err(ny, nx)
        }
    };
    let mut kernel = [[0.0; 7]; 7];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
            *k = (-(dx * dx + dy * dy) / 50.0).exp();
            ksum += *k;
        }
    }
    let ea = |y: usize, x: usize| {
        let mut acc = 0.0;
        for (i, row) in kernel.iter().enumerate() {
            for (j, k) in row.iter().enumerate() {
                let (sy, sx) = (y as i64 + i as i64 - 3, x as i64 + j as i64 - 3);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    acc += k / ksum * et(sy as usize, sx as usize);
                }
            }
        }
        acc
    };
    let (mut sum_fg, mut fp) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt.get(y, x) == 1.0 {
                sum_fg += err(y, x).min(ea(y, x));
            } else {
                let (_, d) = nearest(y, x);
                fp += err(y, x) * (2.0 - ((0.5f64).ln() / 5.0 * d).exp());
            }
        }
    }
    let count = fg.len() as f64;
    let tp = count - sum_fg;
    let r = 1.0 - sum_fg / count;
    let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    Some(if r + p == 0.0 { 0.0 } else { 2.0 * r * p / (r + p) })
}

fn std1(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (x, y) = (mean(p), mean(g));
    let d = n - 1.0 + EPS;
    let sx = p.iter().map(|a| (a - x).powi(2)).sum::<f64>() / d;
    let sy = g.iter().map(|b| (b - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure with α = 0.5.
pub fn s_measure(pred: &Map, gt: &Map) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let p = px(pred);
    let g = px(gt);
    let u = mean(&g);
    if u == 0.0 {
        return 1.0 - mean(&p);
    }
    if u == 1.0 {
        return mean(&p);
    }
    let score = |v: &[f64]| {
        let x = mean(v);
        2.0 * x / (x * x + 1.0 + std1(v) + EPS)
    };
    let fgv: Vec<f64> = p.iter().zip(&g).filter(|t| *t.1 == 1.0).map(|t| *t.0).collect();
    let bgv: Vec<f64> = p.iter().zip(&g).filter(|t| *t.1 == 0.0).map(|t| 1.0 - t.0).collect();
    let so = u * score(&fgv) + (1.0 - u) * score(&bgv);

    let (mut cx, mut cy, mut k) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt.get(y, x) == 1.0 {
                cx += (x + 1) as f64;
                cy += (y + 1) as f64;
                k += 1.0;
            }
        }
    }
    let (cx, cy) = ((cx / k).round() as usize, (cy / k).round() as usize);
    let mut sr = 0.0;
    for (r0, r1, c0, c1) in [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)] {
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        let mut pb = Vec::new();
        let mut gb = Vec::new();
        for y in r0..r1 {
            for x in c0..c1 {
                pb.push(pred.get(y, x));
                gb.push(gt.get(y, x));
            }
        }
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / (h * w) as f64;
        sr += weight * region_ssim(&pb, &gb);
    }
    (0.5 * so + 0.5 * sr).max(0.0)
}

/// Enhanced-alignment measure at the adaptive threshold, mean over pixels.
pub fn e_measure(pred: &Map, gt: &Map) -> f64 {
    let th = (2.0 * mean(&px(pred))).min(1.0);
    let fm: Vec<f64> = px(pred).iter().map(|&v| (v >= th) as u8 as f64).collect();
    let g = px(gt);
    let k = g.iter().sum::<f64>();
    let n = g.len() as f64;
    let enhanced: Vec<f64> = if k == 0.0 {
        fm.iter().map(|f| 1.0 - f).collect()
    } else if k == n {
        fm.clone()
    } else {
        let (mf, mg) = (mean(&fm), mean(&g));
        fm.iter()
            .zip(&g)
            .map(|(f, g)| {
                let (a, b) = (f - mf, g - mg);
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (1.0 + align).powi(2) / 4.0
            })
            .collect()
    };
    mean(&enhanced)
}

/// Square-element erosion by definition: a pixel survives when every
/// pixel of its window lies inside the frame and is foreground.
pub fn erode(mask: &Map, radius: usize) -> Map {
    let (h, w) = (mask.height(), mask.width());
    let r = radius as i64;
    Map::from_fn(h, w, |y, x| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (sy, sx) = (y as i64 + dy, x as i64 + dx);
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 || mask.get(sy as usize, sx as usize) != 1.0 {
                    return 0.0;
                }
            }
        }
        1.0
    })
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut impl Rng) -> Map {
    Map::from_fn(h, w, |_, _| rng.random_bool(density) as u8 as f64)
}

/// A prediction loosely correlated with `gt`; some draws sit on the
/// 8-bit grid, some are continuous, some are exactly binary.
pub fn random_pred(gt: &Map, rng: &mut impl Rng) -> Map {
    let style = rng.random_range(0..3);
    Map::from_fn(gt.height(), gt.width(), |y, x| {
        let g = gt.get(y, x);
        let v: f64 = (0.6 * g + 0.4 * rng.random::<f64>()).clamp(0.0, 1.0);
        match style {
            0 => (v * 255.0).round() / 255.0,
            1 => v,
            _ => rng.random_bool(0.8) as u8 as f64 * g + rng.random_bool(0.1) as u8 as f64 * (1.0 - g),
        }
    })
}

/// Random toy pair of at most 8×8 with a non-empty, non-full ground truth.
pub fn toy_pair(rng: &mut impl Rng) -> (Map, Map) {
    loop {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let gt = random_mask(h, w, rng.random_range(0.15..0.7), rng);
        let k = gt.count_positive();
        if k > 0 && k < h * w {
            let pred = random_pred(&gt, rng);
            return (pred, gt);
        }
    }
}
