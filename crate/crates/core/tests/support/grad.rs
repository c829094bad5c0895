//! Finite-difference checks for every differentiable building block.

use crace::autodiff::{ConvSpec, UpsampleMode};
use crace::crace::{CraceConfig, CraceModule};
use crace::gradcheck::{check_gradients, random_projection, random_tensor, GradCheckConfig, GradMismatch};
use crace::losses::{bce_loss, iou_loss, multilevel_edge_loss, multilevel_saliency_loss, objective, LossConfig};
use crace::network::ResidualBlock;
use crace::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Mode, Module, ParamGroup, Session};
use crace::{Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;

pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> Result<Outcome>,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub checked: usize,
    pub mismatches: Vec<GradMismatch>,
}

#[derive(Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: u64,
    pub checked: usize,
    pub failures: Vec<(u64, String)>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ 0xc0ffee)
}

fn cfg(seed: u64, max_coords: usize) -> GradCheckConfig {
    GradCheckConfig {
        max_coords,
        seed,
        ..GradCheckConfig::default()
    }
}

fn rand(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    random_tensor(shape, lo, hi, r)
}

/// Binary 0/1 tensor.
fn mask(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.random_bool(0.4) as u8 as f64)
}

fn op<F>(inputs: Vec<Tensor>, seed: u64, f: F) -> Result<Outcome>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let report = check_gradients(&inputs, |_, v| random_projection(f(v)?, seed), &cfg(seed, 64))?;
    Ok(Outcome {
        checked: report.checked,
        mismatches: report.mismatches,
    })
}

/// Checks gradients with respect to the inputs and every trainable
/// parameter of `m`, with parameters redrawn uniformly first.
fn module<M, F>(mut m: M, inputs: Vec<Tensor>, seed: u64, r: &mut ChaCha8Rng, f: F) -> Result<Outcome>
where
    M: Module,
    F: for<'t> Fn(&M, &Session<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    m.visit_mut(&mut |p| {
        if p.trainable() {
            p.value = random_tensor(p.value.shape(), -0.8, 0.8, r);
        }
    });
    let mut names = Vec::new();
    let mut all = inputs.clone();
    m.visit(&mut |p| {
        if p.trainable() {
            names.push(p.name.clone());
            all.push(p.value.clone());
        }
    });
    let k = inputs.len();
    let report = check_gradients(
        &all,
        |tape, vars| {
            let s = Session::new(tape, Mode::Train);
            for (name, v) in names.iter().zip(&vars[k..]) {
                s.bind_to(name, *v)?;
            }
            random_projection(f(&m, &s, &vars[..k])?, seed)
        },
        &cfg(seed, 16),
    )?;
    Ok(Outcome {
        checked: report.checked,
        mismatches: report.mismatches,
    })
}

const X: [usize; 4] = [2, 3, 4, 5];

fn crace_cfg(n: usize, depth: bool) -> CraceConfig {
    CraceConfig {
        n,
        depth_input: depth,
        ..CraceConfig::default()
    }
}

fn crace_module(depth: bool, r: &mut ChaCha8Rng) -> Result<CraceModule> {
    CraceModule::new("m", crace_cfg(3, depth), 2, 4, depth.then_some(2), r)
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add (broadcast)",
            run: |seed| {
                let r = &mut rng(seed);
                op(
                    vec![rand(&X, -2.0, 2.0, r), rand(&[2, 3, 1, 1], -2.0, 2.0, r)],
                    seed,
                    |v| v[0].add(v[1]),
                )
            },
        },
        Case {
            name: "sub (broadcast)",
            run: |seed| {
                let r = &mut rng(seed);
                op(
                    vec![rand(&[1, 3, 1, 5], -2.0, 2.0, r), rand(&X, -2.0, 2.0, r)],
                    seed,
                    |v| v[0].sub(v[1]),
                )
            },
        },
        Case {
            name: "mul (broadcast)",
            run: |seed| {
                let r = &mut rng(seed);
                op(
                    vec![rand(&X, -2.0, 2.0, r), rand(&[2, 3, 1, 1], -2.0, 2.0, r)],
                    seed,
                    |v| v[0].mul(v[1]),
                )
            },
        },
        Case {
            name: "div",
            run: |seed| {
                let r = &mut rng(seed);
                let b = Tensor::from_fn(X.to_vec(), |_| {
                    let m = r.random_range(0.5..2.0);
                    if r.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                });
                op(vec![rand(&X, -2.0, 2.0, r), b], seed, |v| v[0].div(v[1]))
            },
        },
        Case {
            name: "scalar ops",
            run: |seed| {
                let r = &mut rng(seed);
                let (a, m) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
                op(vec![rand(&X, -2.0, 2.0, r)], seed, move |v| {
                    Ok(v[0].add_scalar(a).mul_scalar(m).one_minus())
                })
            },
        },
        Case {
            name: "sigmoid",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&X, -6.0, 6.0, r)], seed, |v| Ok(v[0].sigmoid()))
            },
        },
        Case {
            name: "relu",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&X, -2.0, 2.0, r)], seed, |v| Ok(v[0].relu()))
            },
        },
        Case {
            name: "ln",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&X, 0.1, 3.0, r)], seed, |v| Ok(v[0].ln()))
            },
        },
        Case {
            name: "clamp",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&X, -2.0, 2.0, r)], seed, |v| Ok(v[0].clamp(-0.7, 0.9)))
            },
        },
        Case {
            name: "sum / mean",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&X, -2.0, 2.0, r)], seed, |v| {
                    v[0].sum().add(v[0].mean().mul_scalar(3.0))
                })
            },
        },
        Case {
            name: "sum_axes / mean_axes",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&X, -2.0, 2.0, r)], seed, |v| {
                    v[0].sum_axes(&[1, 3])?.add(v[0].mean_axes(&[0, 1, 3])?)
                })
            },
        },
        Case {
            name: "global_avg_pool",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&X, -2.0, 2.0, r)], seed, |v| v[0].global_avg_pool())
            },
        },
        Case {
            name: "concat_channels",
            run: |seed| {
                let r = &mut rng(seed);
                op(
                    vec![rand(&[2, 1, 3, 3], -2.0, 2.0, r), rand(&[2, 3, 3, 3], -2.0, 2.0, r)],
                    seed,
                    |v| Var::concat_channels(&[v[1], v[0], v[1]]),
                )
            },
        },
        Case {
            name: "conv2d 3x3 same",
            run: |seed| {
                let r = &mut rng(seed);
                op(
                    vec![
                        rand(&[2, 3, 5, 6], -1.0, 1.0, r),
                        rand(&[4, 3, 3, 3], -1.0, 1.0, r),
                        rand(&[4], -1.0, 1.0, r),
                    ],
                    seed,
                    |v| v[0].conv2d(v[1], Some(v[2]), ConvSpec::same(3, 1)),
                )
            },
        },
        Case {
            name: "conv2d stride 2",
            run: |seed| {
                let r = &mut rng(seed);
                let spec = ConvSpec {
                    stride: 2,
                    padding: 1,
                    dilation: 1,
                };
                op(
                    vec![rand(&[1, 2, 7, 6], -1.0, 1.0, r), rand(&[3, 2, 3, 3], -1.0, 1.0, r)],
                    seed,
                    move |v| v[0].conv2d(v[1], None, spec),
                )
            },
        },
        Case {
            name: "conv2d dilated",
            run: |seed| {
                let r = &mut rng(seed);
                op(
                    vec![
                        rand(&[1, 2, 6, 6], -1.0, 1.0, r),
                        rand(&[2, 2, 3, 3], -1.0, 1.0, r),
                        rand(&[2], -1.0, 1.0, r),
                    ],
                    seed,
                    |v| v[0].conv2d(v[1], Some(v[2]), ConvSpec::same(3, 2)),
                )
            },
        },
        Case {
            name: "conv2d 1x1",
            run: |seed| {
                let r = &mut rng(seed);
                op(
                    vec![
                        rand(&[2, 4, 3, 3], -1.0, 1.0, r),
                        rand(&[2, 4, 1, 1], -1.0, 1.0, r),
                        rand(&[2], -1.0, 1.0, r),
                    ],
                    seed,
                    |v| v[0].conv2d(v[1], Some(v[2]), ConvSpec::same(1, 1)),
                )
            },
        },
        Case {
            name: "batchnorm_train",
            run: |seed| {
                let r = &mut rng(seed);
                op(
                    vec![
                        rand(&[2, 3, 3, 4], -2.0, 2.0, r),
                        rand(&[3], 0.5, 1.5, r),
                        rand(&[3], -1.0, 1.0, r),
                    ],
                    seed,
                    |v| Ok(v[0].batchnorm_train(v[1], v[2], 1e-5)?.0),
                )
            },
        },
        Case {
            name: "upsample bilinear",
            run: |seed| {
                let r = &mut rng(seed);
                let factor = [2, 3, 4][seed as usize % 3];
                op(vec![rand(&[2, 2, 3, 4], -2.0, 2.0, r)], seed, move |v| {
                    v[0].upsample(factor, UpsampleMode::Bilinear)
                })
            },
        },
        Case {
            name: "upsample nearest",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&[2, 2, 3, 4], -2.0, 2.0, r)], seed, |v| {
                    v[0].upsample(2, UpsampleMode::Nearest)
                })
            },
        },
        Case {
            name: "downsample_avg",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&[2, 2, 6, 4], -2.0, 2.0, r)], seed, |v| {
                    v[0].downsample_avg(2)
                })
            },
        },
        Case {
            name: "pad_to / crop / reshape",
            run: |seed| {
                let r = &mut rng(seed);
                op(vec![rand(&[2, 2, 3, 5], -2.0, 2.0, r)], seed, |v| {
                    v[0].pad_to(4, 8)?.crop(2, 6)?.reshape(&[4, 12])
                })
            },
        },
        Case {
            name: "layer: Conv2d",
            run: |seed| {
                let r = &mut rng(seed);
                let conv = Conv2d::new("c", 3, 2, 3, 1, 1 + seed as usize % 2, true, ParamGroup::Head, r)?;
                module(conv, vec![rand(&[2, 3, 5, 5], -1.0, 1.0, r)], seed, r, |m, s, v| {
                    m.forward(s, v[0])
                })
            },
        },
        Case {
            name: "layer: BatchNorm2d",
            run: |seed| {
                let r = &mut rng(seed);
                let bn = BatchNorm2d::new("bn", 3, ParamGroup::Head);
                module(bn, vec![rand(&[2, 3, 3, 3], -2.0, 2.0, r)], seed, r, |m, s, v| {
                    m.forward(s, v[0])
                })
            },
        },
        Case {
            name: "layer: ConvBnRelu",
            run: |seed| {
                let r = &mut rng(seed);
                let layer = ConvBnRelu::new("cbr", 2, 3, 3, 1 + seed as usize % 2, ParamGroup::Backbone, r)?;
                module(layer, vec![rand(&[2, 2, 6, 6], -1.0, 1.0, r)], seed, r, |m, s, v| {
                    m.forward(s, v[0])
                })
            },
        },
        Case {
            name: "layer: ResidualBlock",
            run: |seed| {
                let r = &mut rng(seed);
                let block = ResidualBlock::new("res", 2, ParamGroup::Backbone, r)?;
                module(block, vec![rand(&[2, 2, 4, 4], -1.0, 1.0, r)], seed, r, |m, s, v| {
                    m.forward(s, v[0])
                })
            },
        },
        Case {
            name: "crace: cross attention",
            run: |seed| {
                let r = &mut rng(seed);
                let m = crace_module(false, r)?;
                let inputs = vec![rand(&[2, 2, 4, 4], -1.0, 1.0, r), rand(&[2, 4, 2, 2], -1.0, 1.0, r)];
                module(m, inputs, seed, r, |m, s, v| {
                    Ok(m.cross_attention(s, v[0], v[1], None)?.fused)
                })
            },
        },
        Case {
            name: "crace: cross attention with depth",
            run: |seed| {
                let r = &mut rng(seed);
                let m = crace_module(true, r)?;
                let inputs = vec![
                    rand(&[2, 2, 4, 4], -1.0, 1.0, r),
                    rand(&[2, 4, 2, 2], -1.0, 1.0, r),
                    rand(&[2, 2, 4, 4], -1.0, 1.0, r),
                ];
                module(m, inputs, seed, r, |m, s, v| {
                    Ok(m.cross_attention(s, v[0], v[1], Some(v[2]))?.fused)
                })
            },
        },
        Case {
            name: "crace: channel attention",
            run: |seed| {
                let r = &mut rng(seed);
                let m = crace_module(false, r)?;
                module(m, vec![rand(&[2, 6, 3, 3], -1.0, 1.0, r)], seed, r, |m, s, v| {
                    m.channel_attention(s, v[0])
                })
            },
        },
        Case {
            name: "crace: multi-scale context",
            run: |seed| {
                let r = &mut rng(seed);
                let m = crace_module(false, r)?;
                let side = 5 + seed as usize % 6;
                module(
                    m,
                    vec![rand(&[1, 3, side, side + 1], -1.0, 1.0, r)],
                    seed,
                    r,
                    |m, s, v| m.multi_scale(s, v[0]),
                )
            },
        },
        Case {
            name: "crace: attentive fusion",
            run: |seed| {
                let r = &mut rng(seed);
                let m = crace_module(false, r)?;
                let inputs = vec![rand(&[2, 3, 3, 3], -1.0, 1.0, r), rand(&[2, 3, 3, 3], -1.0, 1.0, r)];
                module(m, inputs, seed, r, |m, s, v| Ok(m.attentive_fusion(s, v[0], v[1])?.0))
            },
        },
        Case {
            name: "crace: full module with depth",
            run: |seed| {
                let r = &mut rng(seed);
                let m = crace_module(true, r)?;
                let inputs = vec![
                    rand(&[2, 2, 4, 4], -1.0, 1.0, r),
                    rand(&[2, 4, 2, 2], -1.0, 1.0, r),
                    rand(&[2, 2, 4, 4], -1.0, 1.0, r),
                ];
                module(m, inputs, seed, r, |m, s, v| m.forward(s, v[0], v[1], Some(v[2])))
            },
        },
        Case {
            name: "loss: bce",
            run: |seed| {
                let r = &mut rng(seed);
                let target = mask(&[2, 1, 4, 4], r);
                op(vec![rand(&[2, 1, 4, 4], -4.0, 4.0, r)], seed, move |v| {
                    bce_loss(v[0].sigmoid(), v[0].tape().constant(target.clone()))
                })
            },
        },
        Case {
            name: "loss: iou",
            run: |seed| {
                let r = &mut rng(seed);
                let target = mask(&[2, 1, 4, 4], r);
                op(vec![rand(&[2, 1, 4, 4], -4.0, 4.0, r)], seed, move |v| {
                    iou_loss(v[0].sigmoid(), v[0].tape().constant(target.clone()))
                })
            },
        },
        Case {
            name: "loss: multi-level saliency and edge",
            run: |seed| {
                let r = &mut rng(seed);
                let (s, e) = (mask(&[1, 1, 4, 4], r), mask(&[1, 1, 4, 4], r));
                let inputs: Vec<Tensor> = (0..4).map(|_| rand(&[1, 1, 4, 4], -3.0, 3.0, r)).collect();
                let cfg = LossConfig {
                    multi_level: seed % 2 == 0,
                    ..LossConfig::default()
                };
                op(inputs, seed, move |v| {
                    let t = v[0].tape();
                    let p: Vec<_> = v.iter().map(|x| x.sigmoid()).collect();
                    let ls = multilevel_saliency_loss(&p, t.constant(s.clone()), &cfg)?;
                    ls.add(multilevel_edge_loss(&p, t.constant(e.clone()), &cfg)?)
                })
            },
        },
        Case {
            name: "loss: full objective with depth",
            run: |seed| {
                let r = &mut rng(seed);
                let (s, e) = (mask(&[2, 1, 4, 4], r), mask(&[2, 1, 4, 4], r));
                let inputs: Vec<Tensor> = (0..12).map(|_| rand(&[2, 1, 4, 4], -3.0, 3.0, r)).collect();
                op(inputs, seed, move |v| {
                    let t = v[0].tape();
                    let terms = objective(
                        &v[0..4],
                        &v[4..8],
                        Some(&v[8..12]),
                        t.constant(s.clone()),
                        t.constant(e.clone()),
                        &LossConfig::default(),
                    )?;
                    Ok(terms.total)
                })
            },
        },
    ]
}

pub fn run_case(case: &Case, seeds: u64) -> CaseResult {
    let mut checked = 0;
    let mut failures = Vec::new();
    for seed in 0..seeds {
        match (case.run)(seed) {
            Ok(o) => {
                checked += o.checked;
                failures.extend(o.mismatches.iter().map(|m| (seed, format!("{m:?}"))));
            }
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    CaseResult {
        name: case.name,
        seeds,
        checked,
        failures,
    }
}

pub fn run_all(seeds: u64) -> Vec<CaseResult> {
    cases().iter().map(|c| run_case(c, seeds)).collect()
}
