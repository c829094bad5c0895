//! Procedural saliency datasets: one to three anti-aliased shapes on a
//! textured background, with exact masks and optional depth.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::map::{quantize, Map};
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;
const MIN_FG: f64 = 0.05;
const MAX_FG: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub with_depth: bool,
    /// Paint shapes with the background texture so only depth reveals them.
    pub camouflage: bool,
}

impl SyntheticConfig {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        Self {
            count,
            size,
            seed,
            with_depth: false,
            camouflage: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Ellipse { rx: f64, ry: f64 },
    Rect { hx: f64, hy: f64 },
    Blob { r0: f64, harmonics: [(f64, f64, f64); 2] },
}

#[derive(Debug, Clone)]
struct Shape {
    cx: f64,
    cy: f64,
    angle: f64,
    kind: Kind,
    color: [f64; 3],
    depth: f64,
}

impl Shape {
    fn random(size: f64, rng: &mut impl Rng) -> Self {
        let cx = rng.random_range(0.2..0.8) * size;
        let cy = rng.random_range(0.2..0.8) * size;
        let kind = match rng.random_range(0..3) {
            0 => Kind::Ellipse {
                rx: rng.random_range(0.1..0.3) * size,
                ry: rng.random_range(0.1..0.3) * size,
            },
            1 => Kind::Rect {
                hx: rng.random_range(0.08..0.25) * size,
                hy: rng.random_range(0.08..0.25) * size,
            },
            _ => Kind::Blob {
                r0: rng.random_range(0.1..0.25) * size,
                harmonics: [
                    (3.0, rng.random_range(0.05..0.2), rng.random_range(0.0..2.0 * PI)),
                    (5.0, rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI)),
                ],
            },
        };
        Self {
            cx,
            cy,
            angle: rng.random_range(0.0..PI),
            kind,
            color: [0.0; 3],
            depth: rng.random_range(0.65..1.0),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match &self.kind {
            Kind::Ellipse { rx, ry } => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
            Kind::Rect { hx, hy } => u.abs() <= *hx && v.abs() <= *hy,
            Kind::Blob { r0, harmonics } => {
                let theta = v.atan2(u);
                let r = harmonics
                    .iter()
                    .fold(1.0, |acc, &(k, a, phase)| acc + a * (k * theta + phase).sin());
                (u * u + v * v).sqrt() <= r0 * r
            }
        }
    }

    /// Fraction of the pixel at `(x, y)` covered by the shape.
    fn coverage(&self, x: usize, y: usize) -> f64 {
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut inside = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) * step;
                let py = y as f64 + (sy as f64 + 0.5) * step;
                if self.contains(px, py) {
                    inside += 1;
                }
            }
        }
        inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

/// Smooth colour gradient plus an oriented sinusoidal texture.
struct Background {
    base: [f64; 3],
    gradient: [f64; 2],
    freq: [f64; 2],
    phase: f64,
    amplitude: f64,
    depth: [f64; 3],
}

impl Background {
    fn random(size: f64, rng: &mut impl Rng) -> Self {
        let base = [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        ];
        let angle: f64 = rng.random_range(0.0..PI);
        let period = rng.random_range(0.1..0.3) * size;
        let w = 2.0 * PI / period;
        // Depth plane with values in [0, 0.35].
        let d0 = rng.random_range(0.0..0.15);
        let span = 0.35 - d0;
        let dx = rng.random_range(0.0..span);
        let dy = rng.random_range(0.0..span - dx);
        Self {
            base,
            gradient: [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)],
            freq: [w * angle.cos(), w * angle.sin()],
            phase: rng.random_range(0.0..2.0 * PI),
            amplitude: rng.random_range(0.05..0.12),
            depth: [d0, dx, dy],
        }
    }

    fn color(&self, x: f64, y: f64, size: f64) -> [f64; 3] {
        let g = self.gradient[0] * (x / size - 0.5) + self.gradient[1] * (y / size - 0.5);
        let t = self.amplitude * (self.freq[0] * x + self.freq[1] * y + self.phase).sin();
        std::array::from_fn(|c| (self.base[c] + g + t * if c == 1 { -1.0 } else { 1.0 }).clamp(0.0, 1.0))
    }

    fn depth(&self, x: f64, y: f64, size: f64) -> f64 {
        self.depth[0] + self.depth[1] * x / size + self.depth[2] * y / size
    }
}

/// A shape colour far enough from the background base.
fn contrasting_color(bg: &[f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let d: f64 = c.iter().zip(bg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if d >= 0.45 {
            return c;
        }
    }
}

/// Renders one sample. All values are already on the 8-bit grid, so
/// writing and re-reading the sample is lossless.
pub fn render(id: String, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Sample {
    let n = cfg.size;
    let size = n as f64;
    loop {
        let bg = Background::random(size, rng);
        let count = rng.random_range(1..=3);
        let mut shapes: Vec<Shape> = (0..count).map(|_| Shape::random(size, rng)).collect();
        for s in &mut shapes {
            s.color = contrasting_color(&bg.base, rng);
        }
        let coverage: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| (0..n * n).map(|i| s.coverage(i % n, i / n)).collect())
            .collect();
        // Union coverage: a pixel is foreground when at least half of it is
        // covered by some shape.
        let gt = Map::from_fn(n, n, |y, x| {
            let i = y * n + x;
            let mut free = 1.0;
            for c in &coverage {
                free *= 1.0 - c[i];
            }
            if 1.0 - free >= 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let frac = gt.mean();
        if !(MIN_FG..=MAX_FG).contains(&frac) {
            continue;
        }

        let mut image = vec![0.0; 3 * n * n];
        let mut depth = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let background = bg.color(px, py, size);
                let mut rgb = background;
                let mut d = bg.depth(px, py, size);
                for (s, c) in shapes.iter().zip(&coverage) {
                    let a = c[i];
                    if a == 0.0 {
                        continue;
                    }
                    let fill = if cfg.camouflage { background } else { s.color };
                    for ch in 0..3 {
                        rgb[ch] = (1.0 - a) * rgb[ch] + a * fill[ch];
                    }
                    d = (1.0 - a) * d + a * s.depth;
                }
                for (ch, v) in rgb.iter().enumerate() {
                    let noisy = v + rng.random_range(-0.02..0.02);
                    image[ch * n * n + i] = quantize(noisy) as f64 / 255.0;
                }
                depth[i] = quantize(d + rng.random_range(-0.02..0.02)) as f64 / 255.0;
            }
        }
        let image = Tensor::new([3, n, n], image).expect("3·n·n values");
        let depth = cfg.with_depth.then(|| Map::new(n, n, depth).expect("n·n values"));
        return Sample { id, image, gt, depth };
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    if cfg.count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image".into()));
    }
    if cfg.size < 8 {
        return Err(Error::Config(format!("synthetic image size {} is too small", cfg.size)));
    }
    Ok((0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            render(format!("{i:04}"), cfg, &mut rng)
        })
        .collect())
}

/// Generates the dataset and writes it under `dir` in the layout read by
/// [`super::Dataset::load`].
pub fn write_synthetic(dir: &Path, cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    let samples = generate(cfg)?;
    super::Dataset {
        samples: samples.clone(),
    }
    .save(dir)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let cfg = SyntheticConfig {
            with_depth: true,
            ..SyntheticConfig::new(6, 32, 3)
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.gt, y.gt);
            let frac = x.gt.mean();
            assert!((MIN_FG..=MAX_FG).contains(&frac), "{frac}");
            let d = x.depth.as_ref().unwrap();
            let (mut fg, mut nf, mut bgs, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for (dv, g) in d.data().iter().zip(x.gt.data()) {
                if *g == 1.0 {
                    fg += dv;
                    nf += 1.0;
                } else {
                    bgs += dv;
                    nb += 1.0;
                }
            }
            assert!(fg / nf - bgs / nb >= 0.2);
        }
    }

    #[test]
    fn camouflage_hides_shapes_in_rgb() {
        let cfg = SyntheticConfig {
            camouflage: true,
            ..SyntheticConfig::new(1, 32, 9)
        };
        let plain = SyntheticConfig::new(1, 32, 9);
        let a = &generate(&cfg).unwrap()[0];
        let b = &generate(&plain).unwrap()[0];
        assert_eq!(a.gt, b.gt);
        assert_ne!(a.image, b.image);
    }
}
