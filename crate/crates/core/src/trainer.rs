//! SGD training: split learning rates, warm-up with polynomial decay,
//! augmentation, checkpoints and bit-exact resume.
//!
//! Every step draws its randomness from a ChaCha stream keyed by
//! `(seed, step)`, so a run resumed from a checkpoint replays exactly the
//! batches and augmentations of an uninterrupted run.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::config::{parse_config, render_config};
use crate::data::{resize, Checkpoint, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{make_edge_gt, objective, LossConfig};
use crate::map::Map;
use crate::metrics::{evaluate, EvalOptions, MetricReport};
use crate::network::{InputMode, NetworkConfig, SodNetwork};
use crate::nn::{update_running_stats, Mode, Module, ParamGroup, Session};
use crate::tensor::Tensor;

const MOMENTUM_PREFIX: &str = "momentum/";
pub const SCALES: [f64; 3] = [0.75, 1.0, 1.25];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    /// Defaults to 5% of `total_steps` when `None`.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub seed: u64,
    pub hflip: bool,
    pub random_crop: bool,
    pub multiscale: bool,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_backbone: 0.005,
            lr_head: 0.05,
            warmup_steps: None,
            total_steps: 500,
            batch_size: 4,
            input_size: 64,
            seed: 7,
            hflip: true,
            random_crop: true,
            multiscale: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        if !(self.lr_backbone > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay >= 0".into()));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size {} is not a multiple of 32",
                self.input_size
            )));
        }
        if self.warmup() > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 20)
    }

    pub fn lr(&self, group: ParamGroup, step: usize) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Head => self.lr_head,
            ParamGroup::Buffer => return 0.0,
        };
        base * lr_factor(step, self.warmup(), self.total_steps)
    }
}

/// Linear warm-up over `warmup` steps, then `(1 - progress)^0.9`.
pub fn lr_factor(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    (1.0 - progress).powf(0.9)
}

/// One SGD update: `v ← m·v + g + wd·p`, `p ← p − lr·v`.
pub fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

pub fn hflip(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let flip = |data: &[f64], planes: usize| -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        for c in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    out[(c * h + y) * w + x] = data[(c * h + y) * w + (w - 1 - x)];
                }
            }
        }
        out
    };
    Sample {
        id: sample.id.clone(),
        image: Tensor::new([3, h, w], flip(sample.image.data(), 3)).expect("same size"),
        gt: Map::new(h, w, flip(sample.gt.data(), 1)).expect("same size"),
        depth: sample
            .depth
            .as_ref()
            .map(|d| Map::new(h, w, flip(d.data(), 1)).expect("same size")),
    }
}

/// Crops the window with top-left corner `(y0, x0)` and size `ch × cw`.
pub fn crop(sample: &Sample, y0: usize, x0: usize, ch: usize, cw: usize) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    assert!(y0 + ch <= h && x0 + cw <= w, "crop window outside the image");
    let cut = |data: &[f64], planes: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(planes * ch * cw);
        for c in 0..planes {
            for y in y0..y0 + ch {
                let row = (c * h + y) * w;
                out.extend_from_slice(&data[row + x0..row + x0 + cw]);
            }
        }
        out
    };
    Sample {
        id: sample.id.clone(),
        image: Tensor::new([3, ch, cw], cut(sample.image.data(), 3)).expect("window size"),
        gt: Map::new(ch, cw, cut(sample.gt.data(), 1)).expect("window size"),
        depth: sample
            .depth
            .as_ref()
            .map(|d| Map::new(ch, cw, cut(d.data(), 1)).expect("window size")),
    }
}

/// Random horizontal flip and random crop (side 75–100%), applied
/// identically to every field. The result is not resized.
pub fn augment(sample: &Sample, cfg: &TrainConfig, rng: &mut impl Rng) -> Sample {
    let mut s = if cfg.hflip && rng.random_bool(0.5) {
        hflip(sample)
    } else {
        sample.clone()
    };
    if cfg.random_crop {
        let frac = rng.random_range(0.75..=1.0);
        let (h, w) = (s.height(), s.width());
        let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
        let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        s = crop(&s, y0, x0, ch, cw);
    }
    s
}

/// Resizes every field to `size × size`: bilinear for image and depth,
/// nearest for the ground truth.
pub fn fit(sample: &Sample, size: usize) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let mut image = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        image.extend(resize::bilinear(
            &sample.image.data()[c * plane..(c + 1) * plane],
            h,
            w,
            size,
            size,
        ));
    }
    Sample {
        id: sample.id.clone(),
        image: Tensor::new([3, size, size], image).expect("resized"),
        gt: Map::new(size, size, resize::nearest(sample.gt.data(), h, w, size, size)).expect("resized"),
        depth: sample
            .depth
            .as_ref()
            .map(|d| Map::new(size, size, resize::bilinear(d.data(), h, w, size, size)).expect("resized")),
    }
}

/// `base · scale` rounded to the nearest positive multiple of 32.
pub fn snap_size(base: usize, scale: f64) -> usize {
    (((base as f64 * scale) / 32.0).round() as usize).max(1) * 32
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Stacked tensors for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor,
    pub gts: Tensor,
    pub edges: Tensor,
    pub depths: Option<Tensor>,
}

/// Stacks samples already resized to a common size.
pub fn make_batch(samples: &[Sample], edge_radius: usize, with_depth: bool) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut gts = Vec::with_capacity(samples.len());
    let mut edges = Vec::with_capacity(samples.len());
    let mut depths = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape("make_batch", "samples differ in size"));
        }
        images.extend_from_slice(s.image.data());
        edges.push(make_edge_gt(&s.gt, edge_radius)?);
        gts.push(&s.gt);
        if with_depth {
            depths.push(
                s.depth
                    .as_ref()
                    .ok_or_else(|| Error::Dataset(format!("{}: missing depth map", s.id)))?,
            );
        }
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::new([samples.len(), 3, h, w], images)?,
        gts: Map::stack(&gts)?,
        edges: Map::stack(&edges.iter().collect::<Vec<_>>())?,
        depths: if with_depth { Some(Map::stack(&depths)?) } else { None },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub saliency: f64,
    pub edge: Option<f64>,
    pub depth: Option<f64>,
}

pub fn format_log(rows: &[LogRow], with_depth: bool) -> String {
    let mut s = String::from(if with_depth {
        "step,lr,L_total,L_S,L_E,L_D\n"
    } else {
        "step,lr,L_total,L_S,L_E\n"
    });
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_default();
    for r in rows {
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{}",
            r.step,
            r.lr,
            r.total,
            r.saliency,
            opt(r.edge)
        ));
        if with_depth {
            s.push(',');
            s.push_str(&opt(r.depth));
        }
        s.push('\n');
    }
    s
}

pub struct Trainer {
    pub config: TrainConfig,
    pub network: SodNetwork,
    velocity: HashMap<String, Tensor>,
    step: usize,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let network = SodNetwork::new(config.network.clone(), &mut rng)?;
        Ok(Self {
            config,
            network,
            velocity: HashMap::new(),
            step: 0,
            log: Vec::new(),
        })
    }

    /// Restores parameters, momentum buffers, configuration and step count.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let (config, step) = parse_config(&ckpt.config)?;
        let mut t = Self::new(config)?;
        ckpt.apply_to(&mut t.network)?;
        for (name, tensor) in &ckpt.tensors {
            if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
                t.velocity.insert(p.to_string(), tensor.clone());
            }
        }
        t.step = step;
        Ok(t)
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_module(render_config(&self.config, self.step), &self.network);
        let mut names: Vec<_> = self.velocity.keys().collect();
        names.sort();
        for n in names {
            ckpt.tensors
                .push((format!("{MOMENTUM_PREFIX}{n}"), self.velocity[n].clone()));
        }
        ckpt
    }

    fn with_depth(&self) -> bool {
        self.config.network.mode == InputMode::Rgbd
    }

    /// Samples, augments and stacks the batch for the current step.
    pub fn batch(&self, dataset: &Dataset) -> Result<Batch> {
        if dataset.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, self.step);
        let size = if cfg.multiscale {
            snap_size(cfg.input_size, SCALES[rng.random_range(0..SCALES.len())])
        } else {
            cfg.input_size
        };
        let k = cfg.batch_size.min(dataset.len());
        let picks = index::sample(&mut rng, dataset.len(), k).into_vec();
        let samples: Vec<Sample> = picks
            .iter()
            .map(|&i| fit(&augment(&dataset.samples[i], cfg, &mut rng), size))
            .collect();
        make_batch(&samples, cfg.loss.edge_radius, self.with_depth())
    }

    /// Runs one optimisation step and returns its log row.
    pub fn step(&mut self, dataset: &Dataset) -> Result<LogRow> {
        if self.with_depth() && !dataset.has_depth() {
            return Err(Error::Dataset(
                "RGB-D training needs depth maps for every sample".into(),
            ));
        }
        let batch = self.batch(dataset)?;
        let tape = Tape::new();
        let s = Session::new(&tape, Mode::Train);
        let out = self
            .network
            .forward(&s, s.constant(batch.images), batch.depths.map(|d| s.constant(d)))?;
        let terms = objective(
            &out.saliency,
            &out.edges,
            out.depth_saliency.as_deref(),
            s.constant(batch.gts),
            s.constant(batch.edges),
            &self.config.loss,
        )?;
        let total = terms.total.value().item();
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("loss is {total}"),
            });
        }
        tape.backward(terms.total)?;

        let mut grads = HashMap::new();
        let mut bad = None;
        self.network.visit(&mut |p| {
            if !p.trainable() || bad.is_some() {
                return;
            }
            if let Some(g) = s.grad(&p.name) {
                if !g.is_finite() {
                    bad = Some(p.name.clone());
                }
                grads.insert(p.name.clone(), g);
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }

        let cfg = &self.config;
        let step = self.step;
        let velocity = &mut self.velocity;
        self.network.visit_mut(&mut |p| {
            if !p.trainable() {
                return;
            }
            let lr = cfg.lr(p.group, step);
            let v = velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            let zeros;
            let g = match grads.get(&p.name) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0; p.value.numel()];
                    &zeros
                }
            };
            sgd_update(p.value.data_mut(), g, v.data_mut(), lr, cfg.momentum, cfg.weight_decay);
        });
        update_running_stats(&mut self.network, &s.observations());

        let row = LogRow {
            step,
            lr: cfg.lr(ParamGroup::Head, step),
            total,
            saliency: terms.saliency.value().item(),
            edge: terms.edge.map(|v| v.value().item()),
            depth: terms.depth.map(|v| v.value().item()),
        };
        self.step += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Trains until `total_steps`. With `out_dir`, writes periodic and final
    /// checkpoints plus `loss_log.csv`; on divergence the last good state is
    /// saved as `last_good.ckpt` before the error is returned.
    pub fn run(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<()> {
        while !self.finished() {
            match self.step(dataset) {
                Ok(row) => {
                    if row.step % 50 == 0 || self.finished() {
                        log::info!("step {} lr {:.5} loss {:.5}", row.step, row.lr, row.total);
                    }
                }
                Err(e) => {
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(&dir.join("last_good.ckpt"))?;
                        self.write_log(dir)?;
                    }
                    return Err(e);
                }
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) && !self.finished() {
                    self.checkpoint()
                        .save(&dir.join(format!("step_{:06}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
            self.write_log(dir)?;
        }
        Ok(())
    }

    fn write_log(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("loss_log.csv");
        std::fs::write(&path, format_log(&self.log, self.with_depth())).map_err(|e| Error::io(&path, e))
    }
}

/// Trains from scratch and returns the finished trainer.
pub fn train(dataset: &Dataset, config: TrainConfig, out_dir: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    t.run(dataset, out_dir)?;
    Ok(t)
}

/// Rebuilds the network stored in a checkpoint, with its configuration.
pub fn load_network(ckpt: &Checkpoint) -> Result<(SodNetwork, TrainConfig)> {
    let (config, _) = parse_config(&ckpt.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = SodNetwork::new(config.network.clone(), &mut rng)?;
    ckpt.apply_to(&mut network)?;
    Ok((network, config))
}

/// Per-level probability maps at the original image resolution, finest
/// level first.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub saliency: Vec<Map>,
    pub edges: Vec<Map>,
}

impl Prediction {
    /// The final saliency map (level 2).
    pub fn map(&self) -> &Map {
        &self.saliency[0]
    }
}

/// Runs the network at `size × size` on one image and resizes every output
/// back to the image's own resolution.
pub fn predict_image(net: &SodNetwork, image: &Tensor, depth: Option<&Map>, size: usize) -> Result<Prediction> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape(
            "predict",
            format!("expected (3, H, W), got {:?}", image.shape()),
        ));
    };
    let sample = Sample {
        id: String::new(),
        image: image.clone(),
        gt: Map::filled(h, w, 0.0),
        depth: depth.cloned(),
    };
    sample.validate()?;
    let fitted = fit(&sample, size);
    let depth = match (net.mode(), &fitted.depth) {
        (InputMode::Rgbd, Some(d)) => Some(d.to_tensor()),
        (InputMode::Rgbd, None) => return Err(Error::Config("RGB-D network needs a depth map".into())),
        (InputMode::Rgb, Some(_)) => return Err(Error::Config("RGB-mode network was given a depth map".into())),
        (InputMode::Rgb, None) => None,
    };
    let tape = Tape::new();
    let s = Session::new(&tape, Mode::Eval);
    let input = fitted.image.reshape([1, 3, size, size])?;
    let out = net.forward(&s, s.constant(input), depth.map(|d| s.constant(d)))?;
    let back = |logits: &[crate::autodiff::Var<'_>]| -> Result<Vec<Map>> {
        logits
            .iter()
            .map(|l| {
                let p = l.sigmoid().value();
                let data = resize::bilinear(p.data(), size, size, h, w);
                Map::new(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
            })
            .collect()
    };
    Ok(Prediction {
        saliency: back(&out.saliency)?,
        edges: back(&out.edges)?,
    })
}

/// Final saliency map for each sample.
pub fn predict_samples(net: &SodNetwork, samples: &[Sample], size: usize) -> Result<Vec<Map>> {
    let rgbd = net.mode() == InputMode::Rgbd;
    samples
        .iter()
        .map(|s| {
            let depth = if rgbd { s.depth.as_ref() } else { None };
            Ok(predict_image(net, &s.image, depth, size)?.saliency.swap_remove(0))
        })
        .collect()
}

/// Predicts every sample and scores the maps against the samples' ground truth.
pub fn evaluate_samples(net: &SodNetwork, samples: &[Sample], size: usize, opts: EvalOptions) -> Result<MetricReport> {
    let preds = predict_samples(net, samples, size)?;
    let items: Vec<_> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| (s.id.as_str(), p, &s.gt))
        .collect();
    evaluate(&items, opts)
}
