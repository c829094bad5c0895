//! Forward and adjoint kernels for the spatial operations.
//!
//! All loops reduce in a fixed order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride-1 "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    /// Bilinear, half-pixel centres (`align_corners = false`), edge-clamped.
    #[default]
    Bilinear,
    Nearest,
}

/// `c = a·b + beta·c` for logical `a: m×k`, `b: k×n`, row-major `c: m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ConvGeom {
        cin,
        h,
        w,
        k,
        ho,
        wo,
        spec,
    } = *g;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    let plane = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize * d;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize * d;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom {
        cin,
        h,
        w,
        k,
        ho,
        wo,
        spec,
    } = *g;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    let plane = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kj as isize * d;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Result<(usize, usize, ConvGeom)> {
    let (batch, cin, h, wd) = dims4(x.shape(), "conv2d")?;
    let (cout, wcin, kh, kw) = dims4(w.shape(), "conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but the kernel expects {wcin}"),
        ));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::shape("conv2d", "stride and dilation must be positive"));
    }
    let (Some(ho), Some(wo)) = (spec.output_len(h, kh), spec.output_len(wd, kw)) else {
        return Err(Error::shape(
            "conv2d",
            format!(
                "{h}x{wd} input is smaller than the {kh}x{kw} kernel footprint at dilation {}",
                spec.dilation
            ),
        ));
    };
    Ok((
        batch,
        cout,
        ConvGeom {
            cin,
            h,
            w: wd,
            k: kh,
            ho,
            wo,
            spec,
        },
    ))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let (batch, cout, g) = conv_geometry(x, w, b, spec)?;
    let kdim = g.cin * g.k * g.k;
    let plane = g.ho * g.wo;
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; batch * cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * plane]
    };
    for n in 0..batch {
        let xs = &x.data()[n * in_len..(n + 1) * in_len];
        let ys = &mut out[n * cout * plane..(n + 1) * cout * plane];
        if let Some(b) = b {
            for (co, chunk) in ys.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(cout, kdim, plane, w.data(), false, xs, false, beta, ys);
        } else {
            im2col(xs, &g, &mut cols);
            gemm(cout, kdim, plane, w.data(), false, &cols, false, beta, ys);
        }
    }
    Tensor::new([batch, cout, g.ho, g.wo], out)
}

/// Input, weight and optional bias adjoints.
pub type ConvGrads = (Vec<f64>, Vec<f64>, Option<Vec<f64>>);

/// Adjoints of [`conv2d_forward`] w.r.t. input, weight and bias.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, with_bias: bool, spec: ConvSpec, dy: &[f64]) -> Result<ConvGrads> {
    let (batch, cout, g) = conv_geometry(x, w, None, spec)?;
    let kdim = g.cin * g.k * g.k;
    let plane = g.ho * g.wo;
    let in_len = g.cin * g.h * g.w;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut db = with_bias.then(|| vec![0.0; cout]);
    let mut cols = vec![0.0; kdim * plane];
    for n in 0..batch {
        let xs = &x.data()[n * in_len..(n + 1) * in_len];
        let dys = &dy[n * cout * plane..(n + 1) * cout * plane];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dys.chunks(plane).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if g.is_pointwise() {
            gemm(cout, plane, kdim, dys, false, xs, true, 1.0, &mut dw);
            gemm(
                kdim,
                cout,
                plane,
                w.data(),
                true,
                dys,
                false,
                0.0,
                &mut dx[n * in_len..(n + 1) * in_len],
            );
        } else {
            im2col(xs, &g, &mut cols);
            gemm(cout, plane, kdim, dys, false, &cols, true, 1.0, &mut dw);
            gemm(kdim, cout, plane, w.data(), true, dys, false, 0.0, &mut cols);
            col2im(&cols, &g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok((dx, dw, db))
}

pub struct BatchNormOutput {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

/// Training-mode batch normalisation over `(batch, height, width)`.
pub fn batchnorm_forward(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<BatchNormOutput> {
    let (b, c, h, w) = dims4(x.shape(), "batchnorm")?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "{c} channels but affine parameters have {} / {}",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    let count = b * h * w;
    if count < 2 {
        return Err(Error::DegenerateStatistics(format!("batchnorm over {:?}", x.shape())));
    }
    let plane = h * w;
    let xs = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for n in 0..b {
            let base = (n * c + ch) * plane;
            s += xs[base..base + plane].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for n in 0..b {
            let base = (n * c + ch) * plane;
            v += xs[base..base + plane].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xs.len()];
    let mut y = vec![0.0; xs.len()];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            for i in base..base + plane {
                xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    Ok(BatchNormOutput {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat,
        inv_std,
        mean,
        var,
    })
}

pub fn batchnorm_backward(
    shape: &[usize],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let count = (b * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            for i in base..base + plane {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch] / count;
            for i in base..base + plane {
                dx[i] = scale * (count * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Source index pair and blend weight for one output coordinate.
fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward(x: &Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x.shape(), "upsample")?;
    if factor == 0 {
        return Err(Error::shape("upsample", "factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let xs = x.data();
    let mut out = vec![0.0; b * c * ho * wo];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[(p * ho + oy) * wo + ox] = xs[(p * h + oy / factor) * w + ox / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..b * c {
                let src = &xs[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let (a, bb) = (src[y0 * w + x0], src[y0 * w + x1]);
                        let (cc, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                        let top = a + lx * (bb - a);
                        let bottom = cc + lx * (d - cc);
                        out[(p * ho + oy) * wo + ox] = top + ly * (bottom - top);
                    }
                }
            }
        }
    }
    Tensor::new([b, c, ho, wo], out)
}

pub fn upsample_backward(in_shape: &[usize], factor: usize, mode: UpsampleMode, dy: &[f64]) -> Vec<f64> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    if factor == 1 {
        return dy.to_vec();
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![0.0; b * c * h * w];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        dx[(p * h + oy / factor) * w + ox / factor] += dy[(p * ho + oy) * wo + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..b * c {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let g = dy[(p * ho + oy) * wo + ox];
                        dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                        dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                        dst[y1 * w + x0] += g * ly * (1.0 - lx);
                        dst[y1 * w + x1] += g * ly * lx;
                    }
                }
            }
        }
    }
    dx
}

pub fn avgpool_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x.shape(), "downsample_avg")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "downsample_avg",
            format!("{h}x{w} is not divisible by factor {factor}"),
        ));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let xs = x.data();
    let mut out = vec![0.0; b * c * ho * wo];
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = (p * h + oy * factor + dy) * w + ox * factor;
                    s += xs[row..row + factor].iter().sum::<f64>();
                }
                out[(p * ho + oy) * wo + ox] = s / area;
            }
        }
    }
    Tensor::new([b, c, ho, wo], out)
}

pub fn avgpool_backward(in_shape: &[usize], factor: usize, dy: &[f64]) -> Vec<f64> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    if factor == 1 {
        return dy.to_vec();
    }
    let (ho, wo) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let mut dx = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        for y in 0..h {
            for x in 0..w {
                dx[(p * h + y) * w + x] = dy[(p * ho + y / factor) * wo + x / factor] / area;
            }
        }
    }
    dx
}

/// Copies the top-left `min(h, src_h) × min(w, src_w)` block of every plane
/// between two 4-D layouts, zero-filling the rest of the destination.
pub(crate) fn copy_planes(src: &[f64], src_hw: (usize, usize), planes: usize, dst_hw: (usize, usize)) -> Vec<f64> {
    let (sh, sw) = src_hw;
    let (dh, dw) = dst_hw;
    let (ch, cw) = (sh.min(dh), sw.min(dw));
    let mut out = vec![0.0; planes * dh * dw];
    for p in 0..planes {
        for y in 0..ch {
            let s = (p * sh + y) * sw;
            let d = (p * dh + y) * dw;
            out[d..d + cw].copy_from_slice(&src[s..s + cw]);
        }
    }
    out
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
    let (b, _, h, w) = dims4(first.shape(), "concat_channels")?;
    let mut total = 0;
    for t in parts {
        let (pb, pc, ph, pw) = dims4(t.shape(), "concat_channels")?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("non-channel dims differ: {:?} vs {:?}", first.shape(), t.shape()),
            ));
        }
        total += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * total * plane);
    for n in 0..b {
        for t in parts {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    Tensor::new([b, total, h, w], out)
}
