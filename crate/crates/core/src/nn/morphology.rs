//! Binary erosion with a square structuring element.

use crate::error::{Error, Result};
use crate::map::Map;

/// Erodes a binary mask with a `(2·radius + 1)²` square element. Pixels
/// outside the frame count as background, so foreground touching the
/// border is eroded away there.
pub fn erode(mask: &Map, radius: usize) -> Result<Map> {
    if !mask.is_binary() {
        return Err(Error::Contract(
            "erode expects a binary mask with values in {0, 1}".into(),
        ));
    }
    let (h, w) = (mask.height(), mask.width());
    // Separable: a square window is all-ones iff every row segment is.
    let rows = min_filter_rows(mask.data(), h, w, radius);
    let transposed = transpose(&rows, h, w);
    let cols = min_filter_rows(&transposed, w, h, radius);
    Map::new(h, w, transpose(&cols, w, h))
}

fn min_filter_rows(data: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        // Run length of trailing ones up to x, and of leading ones from x.
        let mut left = vec![0usize; w];
        let mut run = 0;
        for x in 0..w {
            run = if row[x] == 1.0 { run + 1 } else { 0 };
            left[x] = run;
        }
        for x in 0..w {
            if x < radius || x + radius >= w {
                continue;
            }
            if left[x + radius] > 2 * radius {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

fn transpose(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = data[y * w + x];
        }
    }
    out
}
