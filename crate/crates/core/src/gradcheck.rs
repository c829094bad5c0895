//! Central finite-difference gradient checking.
//!
//! The reference derivative is computed purely from forward evaluations, so
//! it is independent of every backward rule it checks. A coordinate passes
//! when `|autodiff - fd| <= rtol * |fd| + atol`. Piecewise-linear ops
//! (ReLU, clamp) make the central difference wrong whenever the probe
//! straddles a kink; a failing coordinate is therefore re-probed with
//! smaller steps before it counts as a failure.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Coordinates probed per input; inputs at most this large are probed exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-6,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub autodiff: f64,
    pub finite_difference: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates that only agreed after shrinking the probe step.
    pub reprobed: usize,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

/// Checks d(f)/d(inputs) for a scalar-valued `f`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter().map(|v| v.grad().expect("params carry gradients")).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (input, tensor) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, cfg.max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        for index in coords {
            let ad = analytic[input].data()[index];
            let mut fd = 0.0;
            let mut ok = false;
            for (attempt, h) in [cfg.step, cfg.step / 10.0, cfg.step / 100.0].into_iter().enumerate() {
                let base = tensor.data()[index];
                probe[input].data_mut()[index] = base + h;
                let up = eval(&probe)?;
                probe[input].data_mut()[index] = base - h;
                let down = eval(&probe)?;
                probe[input].data_mut()[index] = base;
                fd = (up - down) / (2.0 * h);
                if (ad - fd).abs() <= cfg.rtol * fd.abs() + cfg.atol {
                    ok = true;
                    if attempt > 0 {
                        report.reprobed += 1;
                    }
                    break;
                }
            }
            report.checked += 1;
            if !ok {
                report.mismatches.push(GradMismatch {
                    input,
                    index,
                    autodiff: ad,
                    finite_difference: fd,
                });
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued output to a scalar with fixed random weights,
/// so every output element contributes a distinct upstream gradient.
pub fn random_projection<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_9a7d);
    let shape = y.shape();
    let weights = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    y.mul(y.tape().constant(weights)).map(|p| p.sum())
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}
