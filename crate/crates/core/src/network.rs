//! The full detector: residual mini-encoder(s), deep-to-shallow context flow
//! through three CRACE modules, and per-level prediction heads.

use rand::Rng;

use crate::autodiff::{UpsampleMode, Var};
use crate::crace::{CraceConfig, CraceModule};
use crate::error::{Error, Result};
use crate::map::Map;
use crate::nn::{join, Conv2d, ConvBnRelu, Mode, Module, Param, ParamGroup, Session};
use crate::tensor::{dims4, Tensor};

/// Strides of the four emitted feature maps relative to the input.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Rgb,
    Rgbd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub widths: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            blocks_per_stage: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub mode: InputMode,
    pub encoder: EncoderConfig,
    /// One config per CRACE module, ordered deep to shallow (levels 4, 3, 2).
    pub crace: [CraceConfig; 3],
    /// Feed depth through a 3-channel stem by replicating it.
    pub depth_shared_stem: bool,
    pub head_upsample: UpsampleMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::new(InputMode::Rgb, CraceConfig::default())
    }
}

impl NetworkConfig {
    /// Uses `crace` for all three modules; `depth_input` is set from `mode`.
    pub fn new(mode: InputMode, crace: CraceConfig) -> Self {
        let crace = CraceConfig {
            depth_input: mode == InputMode::Rgbd,
            ..crace
        };
        Self {
            mode,
            encoder: EncoderConfig::default(),
            crace: [crace.clone(), crace.clone(), crace],
            depth_shared_stem: false,
            head_upsample: UpsampleMode::Bilinear,
        }
    }

    pub fn n(&self) -> usize {
        self.crace[0].n
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        for c in &self.crace {
            c.validate()?;
            if c.n != self.n() {
                return Err(Error::Config("all CRACE modules must share the same n".into()));
            }
            if c.depth_input && self.mode == InputMode::Rgb {
                return Err(Error::Config("depth_input requires RGB-D mode".into()));
            }
        }
        Ok(())
    }
}

/// `relu(x + conv_bn(conv_bn_relu(x)))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl ResidualBlock {
    pub fn new(name: &str, channels: usize, group: ParamGroup, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            first: ConvBnRelu::new(&join(name, "first"), channels, channels, 3, 1, group, rng)?,
            second: ConvBnRelu::new(&join(name, "second"), channels, channels, 3, 1, group, rng)?,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.second.forward_pre_relu(s, self.first.forward(s, x)?)?;
        Ok(x.add(y)?.relu())
    }
}

impl Module for ResidualBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.first.visit(f);
        self.second.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.first.visit_mut(f);
        self.second.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Vec<ConvBnRelu>,
    blocks: Vec<ResidualBlock>,
}

impl Stage {
    fn forward<'t>(&self, s: &Session<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for d in &self.down {
            x = d.forward(s, x)?;
        }
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        Ok(x)
    }
}

/// Four residual stages at strides 4, 8, 16 and 32. The first stage
/// downsamples twice.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub in_channels: usize,
    pub config: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(
        name: &str,
        in_channels: usize,
        config: EncoderConfig,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = config.widths;
        let mut stages = Vec::with_capacity(4);
        for (i, &width) in w.iter().enumerate() {
            let stage_name = join(name, &format!("stage{}", i + 2));
            let down = if i == 0 {
                let mid = (width / 2).max(1);
                vec![
                    ConvBnRelu::new(&join(&stage_name, "stem1"), in_channels, mid, 3, 2, group, rng)?,
                    ConvBnRelu::new(&join(&stage_name, "stem2"), mid, width, 3, 2, group, rng)?,
                ]
            } else {
                vec![ConvBnRelu::new(
                    &join(&stage_name, "down"),
                    w[i - 1],
                    width,
                    3,
                    2,
                    group,
                    rng,
                )?]
            };
            let blocks = (0..config.blocks_per_stage)
                .map(|b| ResidualBlock::new(&join(&stage_name, &format!("block{b}")), width, group, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
        }
        Ok(Self {
            in_channels,
            config,
            stages,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let (_, c, h, w) = dims4(&x.shape(), "encode")?;
        if c != self.in_channels {
            return Err(Error::shape(
                "encode",
                format!("expected {} channels, got {c}", self.in_channels),
            ));
        }
        check_input_size(h, w)?;
        let mut out = Vec::with_capacity(4);
        let mut x = x;
        for stage in &self.stages {
            x = stage.forward(s, x)?;
            out.push(x);
        }
        Ok(out)
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for st in &self.stages {
            st.down.iter().for_each(|m| m.visit(f));
            st.blocks.iter().for_each(|m| m.visit(f));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for st in &mut self.stages {
            st.down.iter_mut().for_each(|m| m.visit_mut(f));
            st.blocks.iter_mut().for_each(|m| m.visit_mut(f));
        }
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::InputSize(format!(
            "input is {h}x{w}; both sides must be positive multiples of 32"
        )));
    }
    Ok(())
}

/// Depth encoder plus the per-level projections to `n` channels and the
/// depth saliency heads.
#[derive(Debug, Clone)]
pub struct DepthBranch {
    pub encoder: Encoder,
    pub projections: Vec<ConvBnRelu>,
    pub heads: Vec<Conv2d>,
}

impl Module for DepthBranch {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.projections.iter().for_each(|m| m.visit(f));
        self.heads.iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.projections.iter_mut().for_each(|m| m.visit_mut(f));
        self.heads.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

/// Everything one forward pass produces. Level vectors run from level 2
/// (finest) to level 5.
#[derive(Debug, Clone)]
pub struct Outputs<'t> {
    /// Saliency logits at input resolution.
    pub saliency: Vec<Var<'t>>,
    /// Edge logits at input resolution.
    pub edges: Vec<Var<'t>>,
    /// Depth saliency logits at input resolution (RGB-D only).
    pub depth_saliency: Option<Vec<Var<'t>>>,
    /// `F2..F5`.
    pub features: Vec<Var<'t>>,
    pub crace_invocations: usize,
}

#[derive(Debug, Clone)]
pub struct SodNetwork {
    pub config: NetworkConfig,
    pub encoder: Encoder,
    pub top: ConvBnRelu,
    /// Deep to shallow: the modules producing F4, F3, F2.
    pub craces: Vec<CraceModule>,
    pub saliency_heads: Vec<Conv2d>,
    pub edge_heads: Vec<Conv2d>,
    pub depth: Option<DepthBranch>,
}

impl SodNetwork {
    /// RGB components draw from `rng` before any depth component, so an
    /// RGB-D network and an RGB network built from the same seed share
    /// their RGB weights unless CRACE depth inputs are enabled.
    pub fn new(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.n();
        let w = config.encoder.widths;
        let encoder = Encoder::new("rgb", 3, config.encoder.clone(), ParamGroup::Backbone, rng)?;
        let top = ConvBnRelu::new("top", w[3], n, 1, 1, ParamGroup::Head, rng)?;
        let mut craces = Vec::with_capacity(3);
        for (k, level) in [4usize, 3, 2].into_iter().enumerate() {
            let cfg = config.crace[k].clone();
            let depth = cfg.depth_input.then_some(n);
            craces.push(CraceModule::new(
                &format!("crace{level}"),
                cfg,
                w[level - 2],
                n,
                depth,
                rng,
            )?);
        }
        let heads = |prefix: &str, rng: &mut _| -> Result<Vec<Conv2d>> {
            (2..=5)
                .map(|l| Conv2d::new(&format!("{prefix}{l}"), n, 1, 1, 1, 1, true, ParamGroup::Head, rng))
                .collect()
        };
        let saliency_heads = heads("saliency_head", rng)?;
        let edge_heads = heads("edge_head", rng)?;
        let depth = match config.mode {
            InputMode::Rgb => None,
            InputMode::Rgbd => {
                let in_ch = if config.depth_shared_stem { 3 } else { 1 };
                let encoder = Encoder::new("depth", in_ch, config.encoder.clone(), ParamGroup::Head, rng)?;
                let projections = (0..4)
                    .map(|i| ConvBnRelu::new(&format!("depth_proj{}", i + 2), w[i], n, 1, 1, ParamGroup::Head, rng))
                    .collect::<Result<Vec<_>>>()?;
                let heads = heads("depth_head", rng)?;
                Some(DepthBranch {
                    encoder,
                    projections,
                    heads,
                })
            }
        };
        Ok(Self {
            config,
            encoder,
            top,
            craces,
            saliency_heads,
            edge_heads,
            depth,
        })
    }

    pub fn mode(&self) -> InputMode {
        self.config.mode
    }

    pub fn encode<'t>(&self, s: &Session<'t>, image: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.encoder.forward(s, image)
    }

    /// Projected depth features `d2..d5`, each with `n` channels.
    pub fn encode_depth<'t>(&self, s: &Session<'t>, depth: Var<'t>) -> Result<Vec<Var<'t>>> {
        let branch = self
            .depth
            .as_ref()
            .ok_or_else(|| Error::Config("RGB-mode network was given a depth map".into()))?;
        let (_, c, _, _) = dims4(&depth.shape(), "encode_depth")?;
        if c != 1 {
            return Err(Error::shape(
                "encode_depth",
                format!("depth must have 1 channel, got {c}"),
            ));
        }
        let input = if self.config.depth_shared_stem {
            Var::concat_channels(&[depth, depth, depth])?
        } else {
            depth
        };
        let raw = branch.encoder.forward(s, input)?;
        raw.into_iter()
            .zip(&branch.projections)
            .map(|(d, p)| p.forward(s, d))
            .collect()
    }

    /// Returns `[F2, F3, F4, F5]` and the number of CRACE invocations.
    pub fn context_flow<'t>(
        &self,
        s: &Session<'t>,
        features: &[Var<'t>],
        depth_features: Option<&[Var<'t>]>,
    ) -> Result<(Vec<Var<'t>>, usize)> {
        if features.len() != 4 {
            return Err(Error::shape(
                "context_flow",
                format!("expected 4 feature maps, got {}", features.len()),
            ));
        }
        match (self.mode(), depth_features) {
            (InputMode::Rgb, Some(_)) => {
                return Err(Error::Config("RGB-mode network was given depth features".into()));
            }
            (InputMode::Rgbd, None) => {
                return Err(Error::Config("RGB-D network needs depth features".into()));
            }
            (_, Some(d)) if d.len() != 4 => {
                return Err(Error::shape(
                    "context_flow",
                    format!("expected 4 depth maps, got {}", d.len()),
                ));
            }
            _ => {}
        }
        let mut out = vec![self.top.forward(s, features[3])?];
        let mut calls = 0;
        for (k, level) in [4usize, 3, 2].into_iter().enumerate() {
            let module = &self.craces[k];
            let d = if module.config.depth_input {
                depth_features.map(|d| d[level - 2])
            } else {
                None
            };
            let deeper = *out.last().expect("seeded with F5");
            out.push(module.forward(s, features[level - 2], deeper, d)?);
            calls += 1;
        }
        out.reverse();
        Ok((out, calls))
    }

    /// Per-level saliency and edge logits at `stride × level size`.
    pub fn predict<'t>(&self, s: &Session<'t>, levels: &[Var<'t>]) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
        let mut sal = Vec::with_capacity(4);
        let mut edge = Vec::with_capacity(4);
        for (i, &f) in levels.iter().enumerate() {
            let up = |v: Var<'t>| v.upsample(STRIDES[i], self.config.head_upsample);
            sal.push(up(self.saliency_heads[i].forward(s, f)?)?);
            edge.push(up(self.edge_heads[i].forward(s, f)?)?);
        }
        Ok((sal, edge))
    }

    pub fn forward<'t>(&self, s: &Session<'t>, image: Var<'t>, depth: Option<Var<'t>>) -> Result<Outputs<'t>> {
        let features = self.encode(s, image)?;
        let depth_features = match depth {
            Some(d) => {
                let (bi, _, hi, wi) = dims4(&image.shape(), "forward")?;
                let (bd, _, hd, wd) = dims4(&d.shape(), "forward")?;
                if (bi, hi, wi) != (bd, hd, wd) {
                    return Err(Error::shape("forward", "depth map does not match the image size"));
                }
                Some(self.encode_depth(s, d)?)
            }
            None if self.mode() == InputMode::Rgbd => {
                return Err(Error::Config("RGB-D network needs a depth map".into()));
            }
            None => None,
        };
        let (levels, calls) = self.context_flow(s, &features, depth_features.as_deref())?;
        let (saliency, edges) = self.predict(s, &levels)?;
        let depth_saliency = match (&self.depth, &depth_features) {
            (Some(branch), Some(d)) => Some(
                d.iter()
                    .zip(&branch.heads)
                    .enumerate()
                    .map(|(i, (&d, head))| head.forward(s, d)?.upsample(STRIDES[i], self.config.head_upsample))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        Ok(Outputs {
            saliency,
            edges,
            depth_saliency,
            features: levels,
            crace_invocations: calls,
        })
    }

    /// Final saliency maps (sigmoid of the level-2 prediction), one per image.
    pub fn infer(&self, image: &Tensor, depth: Option<&Tensor>) -> Result<Vec<Map>> {
        let tape = crate::autodiff::Tape::new();
        let s = Session::new(&tape, Mode::Eval);
        let out = self.forward(&s, s.constant(image.clone()), depth.map(|d| s.constant(d.clone())))?;
        let p = out.saliency[0].sigmoid().value();
        let (b, _, _, _) = p.dims4()?;
        (0..b).map(|i| Map::from_tensor(&p, i, 0)).collect()
    }

    /// `(name, trainable parameter count)` for each top-level component.
    pub fn parameter_report(&self) -> Vec<(String, usize)> {
        let mut rows = vec![
            ("encoder".to_string(), self.encoder.num_parameters()),
            ("top".to_string(), self.top.num_parameters()),
        ];
        for (m, level) in self.craces.iter().zip([4, 3, 2]) {
            rows.push((format!("crace{level}"), m.num_parameters()));
        }
        let heads: usize = self
            .saliency_heads
            .iter()
            .chain(&self.edge_heads)
            .map(|h| h.num_parameters())
            .sum();
        rows.push(("heads".to_string(), heads));
        if let Some(d) = &self.depth {
            rows.push(("depth".to_string(), d.num_parameters()));
        }
        rows.push(("total".to_string(), self.num_parameters()));
        rows
    }
}

impl Module for SodNetwork {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.top.visit(f);
        self.craces.iter().for_each(|m| m.visit(f));
        self.saliency_heads.iter().for_each(|m| m.visit(f));
        self.edge_heads.iter().for_each(|m| m.visit(f));
        if let Some(d) = &self.depth {
            d.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.top.visit_mut(f);
        self.craces.iter_mut().for_each(|m| m.visit_mut(f));
        self.saliency_heads.iter_mut().for_each(|m| m.visit_mut(f));
        self.edge_heads.iter_mut().for_each(|m| m.visit_mut(f));
        if let Some(d) = &mut self.depth {
            d.visit_mut(f);
        }
    }
}
