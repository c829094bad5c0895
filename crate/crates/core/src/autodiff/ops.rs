use std::rc::Rc;

use super::kernels::{self, BatchNormOutput, ConvSpec, UpsampleMode};
use super::{Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, dims4, for_each_broadcast, reduce_to_shape, Tensor};

/// Largest double below one; keeps sigmoid outputs strictly inside (0, 1).
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, SIGMOID_HI)
}

fn binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape(), op)?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Tensor::new(out, data)
}

/// `(d/da, d/db)` contributions of a broadcast binary op, each reduced to
/// its operand's shape.
fn binary_grads(
    a: &Tensor,
    b: &Tensor,
    out: &[usize],
    g: &[f64],
    da: impl Fn(f64, f64) -> f64,
    db: impl Fn(f64, f64) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut ga = vec![0.0; g.len()];
    let mut gb = vec![0.0; g.len()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(out, &sa, &sb, |o, i, j| {
        ga[o] = g[o] * da(ad[i], bd[j]);
        gb[o] = g[o] * db(ad[i], bd[j]);
    });
    (
        reduce_to_shape(&ga, out, a.shape()),
        reduce_to_shape(&gb, out, b.shape()),
    )
}

// Fallible ops, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary_op(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other, name)?;
        let value = binary(&self.value(), &other.value(), name, f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product with broadcasting over size-1 axes.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::MulScalar(self.id, s))
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t> {
        self.mul_scalar(-1.0).add_scalar(1.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// Natural log; callers keep inputs positive (see [`Var::clamp`]).
    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp { x: self.id, lo, hi })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let value = self.value();
        let mut shape = value.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape(
                    "sum_axes",
                    format!("axis {a} out of range for {:?}", value.shape()),
                ));
            }
            shape[a] = 1;
        }
        let data = reduce_to_shape(value.data(), value.shape(), &shape);
        Ok(self.unary(Tensor::new(shape, data)?, Op::SumAxes(self.id)))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes)?.mul_scalar(1.0 / count as f64))
    }

    /// Spatial mean per channel: `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        dims4(&self.shape(), "global_avg_pool")?;
        self.mean_axes(&[2, 3])
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
        for p in parts {
            first.same_tape(p, "concat_channels")?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = kernels::concat_channels(&refs)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first
            .tape
            .push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        self.same_tape(&weight, "conv2d")?;
        if let Some(b) = &bias {
            self.same_tape(b, "conv2d")?;
        }
        let bias_value = bias.map(|b| b.value());
        let value = kernels::conv2d_forward(&self.value(), &weight.value(), bias_value.as_deref(), spec)?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            spec,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Batch-statistics normalisation; returns the output together with the
    /// batch mean and biased variance per channel.
    pub fn batchnorm_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        self.same_tape(&gamma, "batchnorm")?;
        self.same_tape(&beta, "batchnorm")?;
        let BatchNormOutput {
            y,
            xhat,
            inv_std,
            mean,
            var,
        } = kernels::batchnorm_forward(&self.value(), gamma.value().data(), beta.value().data(), eps)?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat: Rc::new(xhat),
            inv_std: Rc::new(inv_std),
        };
        Ok((self.tape.push(y, op, rg), mean, var))
    }

    pub fn upsample(self, factor: usize, mode: UpsampleMode) -> Result<Var<'t>> {
        let value = kernels::upsample_forward(&self.value(), factor, mode)?;
        Ok(self.unary(
            value,
            Op::Upsample {
                x: self.id,
                factor,
                mode,
            },
        ))
    }

    /// Mean over non-overlapping `factor × factor` windows.
    pub fn downsample_avg(self, factor: usize) -> Result<Var<'t>> {
        let value = kernels::avgpool_forward(&self.value(), factor)?;
        Ok(self.unary(value, Op::AvgPool { x: self.id, factor }))
    }

    /// Zero-pads the bottom and right edges up to `height × width`.
    pub fn pad_to(self, height: usize, width: usize) -> Result<Var<'t>> {
        let value = self.value();
        let (b, c, h, w) = dims4(value.shape(), "pad_to")?;
        if height < h || width < w {
            return Err(Error::shape(
                "pad_to",
                format!("cannot pad {h}x{w} down to {height}x{width}"),
            ));
        }
        if (height, width) == (h, w) {
            return Ok(self);
        }
        let data = kernels::copy_planes(value.data(), (h, w), b * c, (height, width));
        Ok(self.unary(Tensor::new([b, c, height, width], data)?, Op::Pad(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().as_ref().clone().reshape(shape.to_vec())?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Keeps the top-left `height × width` block.
    pub fn crop(self, height: usize, width: usize) -> Result<Var<'t>> {
        let value = self.value();
        let (b, c, h, w) = dims4(value.shape(), "crop")?;
        if height > h || width > w {
            return Err(Error::shape(
                "crop",
                format!("cannot crop {h}x{w} up to {height}x{width}"),
            ));
        }
        if (height, width) == (h, w) {
            return Ok(self);
        }
        let data = kernels::copy_planes(value.data(), (h, w), b * c, (height, width));
        Ok(self.unary(Tensor::new([b, c, height, width], data)?, Op::Crop(self.id)))
    }
}

/// Gradient contributions of one node to its parents.
pub(super) fn backward_rule<'a>(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    value_of: &dyn Fn(usize) -> &'a Tensor,
) -> Vec<(usize, Vec<f64>)> {
    let scale = |x: usize, f: &dyn Fn(usize) -> f64| -> Vec<(usize, Vec<f64>)> {
        vec![(x, g.iter().enumerate().map(|(i, gi)| gi * f(i)).collect())]
    };
    match *op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => {
            let (va, vb) = (value_of(a), value_of(b));
            vec![
                (a, reduce_to_shape(g, out.shape(), va.shape())),
                (b, reduce_to_shape(g, out.shape(), vb.shape())),
            ]
        }
        Op::Sub(a, b) => {
            let (va, vb) = (value_of(a), value_of(b));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![
                (a, reduce_to_shape(g, out.shape(), va.shape())),
                (b, reduce_to_shape(&neg, out.shape(), vb.shape())),
            ]
        }
        Op::Mul(a, b) => {
            let (ga, gb) = binary_grads(value_of(a), value_of(b), out.shape(), g, |_, y| y, |x, _| x);
            vec![(a, ga), (b, gb)]
        }
        Op::Div(a, b) => {
            let (ga, gb) = binary_grads(
                value_of(a),
                value_of(b),
                out.shape(),
                g,
                |_, y| 1.0 / y,
                |x, y| -x / (y * y),
            );
            vec![(a, ga), (b, gb)]
        }
        Op::AddScalar(x) | Op::Reshape(x) => vec![(x, g.to_vec())],
        Op::MulScalar(x, s) => scale(x, &|_| s),
        Op::Sigmoid(x) => {
            let y = out.data();
            scale(x, &|i| y[i] * (1.0 - y[i]))
        }
        Op::Relu(x) => {
            let xv = value_of(x).data();
            scale(x, &|i| if xv[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Log(x) => {
            let xv = value_of(x).data();
            scale(x, &|i| 1.0 / xv[i])
        }
        Op::Clamp { x, lo, hi } => {
            let xv = value_of(x).data();
            scale(x, &|i| if xv[i] >= lo && xv[i] <= hi { 1.0 } else { 0.0 })
        }
        Op::SumAll(x) => vec![(x, vec![g[0]; value_of(x).numel()])],
        Op::SumAxes(x) => {
            let vx = value_of(x);
            let strides = broadcast_strides(out.shape(), vx.shape());
            let mut dx = vec![0.0; vx.numel()];
            for_each_broadcast(vx.shape(), &strides, &strides, |o, i, _| dx[o] = g[i]);
            vec![(x, dx)]
        }
        Op::Concat(ref parts) => {
            let (b, total, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2], out.shape()[3]);
            let plane = h * w;
            let mut offset = 0;
            let mut grads = Vec::with_capacity(parts.len());
            for &p in parts {
                let c = value_of(p).shape()[1];
                let mut dp = Vec::with_capacity(b * c * plane);
                for n in 0..b {
                    let start = (n * total + offset) * plane;
                    dp.extend_from_slice(&g[start..start + c * plane]);
                }
                offset += c;
                grads.push((p, dp));
            }
            grads
        }
        Op::Conv2d { x, w, b, spec } => {
            let (dx, dw, db) = kernels::conv2d_backward(value_of(x), value_of(w), b.is_some(), spec, g)
                .expect("shapes were validated in the forward pass");
            let mut grads = vec![(x, dx), (w, dw)];
            if let (Some(b), Some(db)) = (b, db) {
                grads.push((b, db));
            }
            grads
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
        } => {
            let (dx, dgamma, dbeta) =
                kernels::batchnorm_backward(out.shape(), value_of(gamma).data(), xhat, inv_std, g);
            vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
        }
        Op::Upsample { x, factor, mode } => {
            vec![(x, kernels::upsample_backward(value_of(x).shape(), factor, mode, g))]
        }
        Op::AvgPool { x, factor } => vec![(x, kernels::avgpool_backward(value_of(x).shape(), factor, g))],
        Op::Pad(x) | Op::Crop(x) => {
            let s = value_of(x).shape();
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            vec![(x, kernels::copy_planes(g, (oh, ow), b * c, (h, w)))]
        }
    }
}
