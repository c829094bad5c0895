//! Dense row-major `f64` tensors.
//!
//! [`Tensor`] is a plain value: a shape and a contiguous buffer. Gradient
//! bookkeeping lives on the [`Tape`](crate::autodiff::Tape), which wraps
//! tensors into graph nodes.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} elements but {} were given",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Shape as `(batch, channels, height, width)`; errors for non-4-D tensors.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        dims4(&self.shape, "dims4")
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies out the `(h, w)` plane of image `b`, channel `c` of a 4-D tensor.
    pub fn plane(&self, b: usize, c: usize) -> Result<Vec<f64>> {
        let (nb, nc, h, w) = self.dims4()?;
        if b >= nb || c >= nc {
            return Err(Error::shape(
                "plane",
                format!("index ({b}, {c}) out of range for {:?}", self.shape),
            ));
        }
        let start = (b * nc + c) * h * w;
        Ok(self.data[start..start + h * w].to_vec())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..SHOWN])
        }
    }
}

pub(crate) fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected a 4-D (batch, channel, height, width) tensor, got {shape:?}"),
        )),
    }
}

/// Numpy-style broadcast of two equal-rank shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("rank mismatch: {a:?} vs {b:?} (broadcasting needs equal ranks)"),
        ));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("dimension {axis} differs: {a:?} vs {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` laid out row-major, with zeros on axes that broadcast
/// up to `out`.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for axis in (0..shape.len()).rev() {
        strides[axis] = if shape[axis] == 1 && out[axis] != 1 { 0 } else { acc };
        acc *= shape[axis];
    }
    strides
}

/// Walks every element of `out` in row-major order, handing the callback the
/// flat output index and the matching offsets into two broadcast inputs.
pub(crate) fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..numel {
        f(o, oa, ob);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            oa -= sa[axis] * out[axis];
            ob -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

/// Sums `grad` (laid out as `out`) down to the broadcast source `shape`.
pub(crate) fn reduce_to_shape(grad: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    if out == shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(shape, out);
    let mut acc = vec![0.0; shape.iter().product()];
    for_each_broadcast(out, &strides, &strides, |o, i, _| acc[i] += grad[o]);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(
            broadcast_shape(&[2, 1, 4, 4], &[2, 3, 1, 1], "t").unwrap(),
            vec![2, 3, 4, 4]
        );
        assert!(broadcast_shape(&[2, 3], &[2, 4], "t").is_err());
        assert!(broadcast_shape(&[2, 3], &[3], "t").is_err());
    }

    #[test]
    fn reduce_inverts_broadcast_sum() {
        let g = vec![1.0; 2 * 3 * 4];
        let r = reduce_to_shape(&g, &[2, 3, 4], &[1, 3, 1]);
        assert_eq!(r, vec![8.0, 8.0, 8.0]);
    }
}
