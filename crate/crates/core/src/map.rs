//! Single-channel 2-D maps: saliency predictions, ground truth, edge maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A row-major `height × width` map of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::shape(
                "map",
                format!(
                    "{height}x{width} map needs {} values, got {}",
                    height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_size(&self, other: &Map) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// `1 - v` everywhere.
    pub fn complement(&self) -> Map {
        Map {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Round-trips through 8-bit storage: `round(v * 255) / 255`.
    pub fn quantized(&self) -> Map {
        Map {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
        }
    }

    /// Binarises at `>= 0.5`.
    pub fn binarized(&self) -> Map {
        Map {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// A `(1, 1, H, W)` tensor view of the map.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 1, self.height, self.width], self.data.clone()).expect("size checked on construction")
    }

    /// Stacks same-sized maps into a `(B, 1, H, W)` tensor.
    pub fn stack(maps: &[&Map]) -> Result<Tensor> {
        let first = maps.first().ok_or_else(|| Error::shape("stack", "no maps given"))?;
        let mut data = Vec::with_capacity(maps.len() * first.len());
        for m in maps {
            if !m.same_size(first) {
                return Err(Error::shape(
                    "stack",
                    format!("{}x{} vs {}x{}", first.height, first.width, m.height, m.width),
                ));
            }
            data.extend_from_slice(&m.data);
        }
        Tensor::new([maps.len(), 1, first.height, first.width], data)
    }

    /// Extracts channel `c` of image `b` from a 4-D tensor.
    pub fn from_tensor(t: &Tensor, b: usize, c: usize) -> Result<Map> {
        let (_, _, h, w) = t.dims4()?;
        Map::new(h, w, t.plane(b, c)?)
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
