//! Weighted F-measure.
//!
//! Errors are spread by a 7×7 Gaussian (σ = 5) so that errors near other
//! errors count more; background errors are pulled from the nearest
//! foreground pixel and scaled up with distance from the object.

use super::fmeasure::check_pair;
use crate::error::Result;
use crate::map::Map;

const KERNEL_SIZE: usize = 7;
const SIGMA: f64 = 5.0;
const BETA2: f64 = 1.0;

/// Normalised 7×7 Gaussian, row-major.
pub(crate) fn gaussian_kernel() -> Vec<f64> {
    let r = (KERNEL_SIZE / 2) as f64;
    let mut k: Vec<f64> = (0..KERNEL_SIZE * KERNEL_SIZE)
        .map(|i| {
            let (y, x) = ((i / KERNEL_SIZE) as f64 - r, (i % KERNEL_SIZE) as f64 - r);
            (-(x * x + y * y) / (2.0 * SIGMA * SIGMA)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Euclidean distance to the nearest foreground pixel, and that pixel's
/// index. Ties go to the smaller row, then the smaller column. Foreground
/// pixels map to themselves.
pub(crate) fn distance_transform(gt: &Map) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (gt.height(), gt.width());
    // Nearest foreground row within each column.
    let mut col_best: Vec<Option<usize>> = vec![None; h * w];
    for x in 0..w {
        for y in 0..h {
            let mut best: Option<usize> = None;
            for r in 0..h {
                if gt.get(r, x) == 1.0 {
                    let d = r.abs_diff(y);
                    if best.is_none_or(|b| d < b.abs_diff(y)) {
                        best = Some(r);
                    }
                }
            }
            col_best[y * w + x] = best;
        }
    }
    let mut dist = vec![f64::INFINITY; h * w];
    let mut idx = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, usize, usize)> = None;
            for cx in 0..w {
                if let Some(r) = col_best[y * w + cx] {
                    let d2 = r.abs_diff(y).pow(2) + cx.abs_diff(x).pow(2);
                    let cand = (d2, r, cx);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            if let Some((d2, r, cx)) = best {
                dist[y * w + x] = (d2 as f64).sqrt();
                idx[y * w + x] = r * w + cx;
            }
        }
    }
    (dist, idx)
}

/// Zero-padded correlation with a square odd kernel.
pub(crate) fn filter(data: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in 0..k as isize {
                let sy = y + ky - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k as isize {
                    let sx = x + kx - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    acc += kernel[(ky * k as isize + kx) as usize] * data[(sy * w as isize + sx) as usize];
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

/// Weighted F of one image; `None` when the ground truth has no foreground.
pub fn image_weighted_f(pred: &Map, gt: &Map) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    if gt.count_positive() == 0 {
        return Ok(None);
    }
    let (h, w) = (gt.height(), gt.width());
    let g = gt.data();
    let e: Vec<f64> = pred.data().iter().zip(g).map(|(p, g)| (p - g).abs()).collect();
    let (dist, nearest) = distance_transform(gt);

    let et: Vec<f64> = (0..h * w)
        .map(|i| if g[i] == 1.0 { e[i] } else { e[nearest[i]] })
        .collect();
    let ea = filter(&et, h, w, &gaussian_kernel(), KERNEL_SIZE);

    let mut fp_w = 0.0;
    let mut fg_err = 0.0;
    let mut fg_count = 0.0;
    for i in 0..h * w {
        if g[i] == 1.0 {
            let err = if ea[i] < e[i] { ea[i] } else { e[i] };
            fg_err += err;
            fg_count += 1.0;
        } else {
            let importance = 2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp();
            fp_w += e[i] * importance;
        }
    }
    let tp_w = fg_count - fg_err;
    let recall = 1.0 - fg_err / fg_count;
    let precision = if tp_w + fp_w == 0.0 { 0.0 } else { tp_w / (tp_w + fp_w) };
    let den = recall + BETA2 * precision;
    Ok(Some(if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * recall * precision / den
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[48]);
        assert!(k[24] > k[23]);
    }

    #[test]
    fn distance_ties_prefer_upper_left() {
        let gt = Map::from_fn(3, 3, |y, x| {
            ((y, x) == (0, 1) || (y, x) == (2, 1) || (y, x) == (1, 0)) as u8 as f64
        });
        let (d, i) = distance_transform(&gt);
        assert_eq!(d[4], 1.0);
        assert_eq!(i[4], 1);
    }

    #[test]
    fn identical_and_empty() {
        let gt = Map::from_fn(12, 12, |y, x| ((4..8).contains(&y) && (3..9).contains(&x)) as u8 as f64);
        assert_eq!(image_weighted_f(&gt, &gt).unwrap(), Some(1.0));
        assert!(image_weighted_f(&Map::filled(12, 12, 0.0), &gt).unwrap().unwrap() < 1e-12);
        assert_eq!(image_weighted_f(&gt, &Map::filled(12, 12, 0.0)).unwrap(), None);
    }
}
