//! Resampling of single planes.

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn bilinear(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    if (h, w) == (nh, nw) {
        return src.to_vec();
    }
    let coord = |dst: usize, from: usize, to: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * from as f64 / to as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(from - 1);
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let (y0, y1, fy) = coord(y, h, nh);
        for x in 0..nw {
            let (x0, x1, fx) = coord(x, w, nw);
            let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
            let bottom = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
            out.push(top + fy * (bottom - top));
        }
    }
    out
}

/// Nearest-neighbour resampling; keeps binary maps binary.
pub fn nearest(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = (((y as f64 + 0.5) * h as f64 / nh as f64) as usize).min(h - 1);
        for x in 0..nw {
            let sx = (((x as f64 + 0.5) * w as f64 / nw as f64) as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}
