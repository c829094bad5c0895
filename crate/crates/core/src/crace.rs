//! Cross-attention context extraction.
//!
//! A CRACE module fuses a shallow ("local") feature map with the next
//! deeper ("global") one, and optionally a depth feature map, through four
//! blocks that can each be switched off:
//!
//! 1. **Cross attention.** Both inputs are projected to `n` channels by
//!    conv-BN-ReLU blocks (`C_l`, `C_g`, and `C_d` for depth), summed, and
//!    squeezed to a single sigmoid map `A`. Each projected stream is
//!    re-weighted residually, `s' = s + A·s`, and the streams are
//!    concatenated.
//! 2. **Channel attention.** The concatenation `F` is scaled per channel by
//!    its own global average, concatenated with itself, and reduced to `n`
//!    channels by a 1×1 convolution.
//! 3. **Multi-scale.** Four branches each average-pool by a sampling rate,
//!    apply a dilated 3×3 convolution, and upsample back; the branch
//!    outputs are summed.
//! 4. **Attentive fusion.** The projected global stream gets its own
//!    spatial attention `A_g`, is re-weighted as `g + A_g·g`, concatenated
//!    with the multi-scale output, and reduced to `n` channels.
//!
//! With every block disabled the module is the ablation baseline: the
//! projected streams are concatenated and reduced by a 1×1 convolution.

use rand::Rng;

use crate::autodiff::{UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvBnRelu, Module, Param, ParamGroup, Session};
use crate::tensor::dims4;

#[derive(Debug, Clone, PartialEq)]
pub struct CraceConfig {
    /// Internal channel width.
    pub n: usize,
    pub enable_cross_attention: bool,
    pub enable_channel_attention: bool,
    pub enable_multiscale: bool,
    pub enable_attentive_fusion: bool,
    pub sampling_rates: Vec<usize>,
    /// Paired with `sampling_rates` from the coarsest end; missing leading
    /// entries default to 1. `[1, 4, 6]` against `[1, 2, 4, 8]` yields the
    /// branches (1, 1), (2, 1), (4, 4), (8, 6).
    pub dilation_rates: Vec<usize>,
    pub depth_input: bool,
    /// Kernel of the `C_l` / `C_g` / `C_d` projection blocks.
    pub projection_kernel: usize,
    pub upsample_mode: UpsampleMode,
}

impl Default for CraceConfig {
    fn default() -> Self {
        Self {
            n: 64,
            enable_cross_attention: true,
            enable_channel_attention: true,
            enable_multiscale: true,
            enable_attentive_fusion: true,
            sampling_rates: vec![1, 2, 4, 8],
            dilation_rates: vec![1, 4, 6],
            depth_input: false,
            projection_kernel: 3,
            upsample_mode: UpsampleMode::Bilinear,
        }
    }
}

impl CraceConfig {
    /// All blocks disabled.
    pub fn baseline(n: usize) -> Self {
        Self {
            n,
            enable_cross_attention: false,
            enable_channel_attention: false,
            enable_multiscale: false,
            enable_attentive_fusion: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("crace: n must be at least 1".into()));
        }
        if self.sampling_rates.is_empty() {
            return Err(Error::Config("crace: at least one sampling rate is required".into()));
        }
        if self.sampling_rates.iter().chain(&self.dilation_rates).any(|&r| r == 0) {
            return Err(Error::Config("crace: sampling and dilation rates must be >= 1".into()));
        }
        if self.dilation_rates.len() > self.sampling_rates.len() {
            return Err(Error::Config(format!(
                "crace: {} dilation rates for {} sampling rates",
                self.dilation_rates.len(),
                self.sampling_rates.len()
            )));
        }
        if self.projection_kernel.is_multiple_of(2) {
            return Err(Error::Config("crace: projection kernel must be odd".into()));
        }
        Ok(())
    }

    /// `(sampling rate, dilation)` per multi-scale branch.
    pub fn branches(&self) -> Vec<(usize, usize)> {
        let missing = self.sampling_rates.len() - self.dilation_rates.len().min(self.sampling_rates.len());
        self.sampling_rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                (
                    rate,
                    if i < missing {
                        1
                    } else {
                        self.dilation_rates[i - missing]
                    },
                )
            })
            .collect()
    }

    fn streams(&self) -> usize {
        if self.depth_input {
            3
        } else {
            2
        }
    }
}

/// Intermediate results of the cross-attention block.
#[derive(Debug, Clone)]
pub struct CrossAttention<'t> {
    /// `C_l(f_l)`.
    pub local: Var<'t>,
    /// `C_g(up(f_g))`.
    pub global: Var<'t>,
    /// `C_d(d_l)` when depth is wired in.
    pub depth: Option<Var<'t>>,
    /// `A_lg`, absent when the block is disabled.
    pub attention: Option<Var<'t>>,
    /// Attended streams in local, global, depth order.
    pub streams: Vec<Var<'t>>,
    /// Channel concatenation of `streams`.
    pub fused: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct CraceTrace<'t> {
    pub cross: CrossAttention<'t>,
    pub channel: Var<'t>,
    pub multiscale: Var<'t>,
    /// `A_g`, absent when attentive fusion is disabled.
    pub global_attention: Option<Var<'t>>,
    pub output: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct CraceModule {
    pub config: CraceConfig,
    pub local_proj: ConvBnRelu,
    pub global_proj: ConvBnRelu,
    pub depth_proj: Option<ConvBnRelu>,
    pub attention: Option<Conv2d>,
    pub channel_reduce: Conv2d,
    pub branches: Vec<Conv2d>,
    pub global_attention: Option<Conv2d>,
    pub fusion: Option<Conv2d>,
}

impl CraceModule {
    /// `local_channels` / `global_channels` / `depth_channels` are the
    /// channel counts of the raw inputs before projection.
    pub fn new(
        name: &str,
        config: CraceConfig,
        local_channels: usize,
        global_channels: usize,
        depth_channels: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.depth_input != depth_channels.is_some() {
            return Err(Error::Config(format!(
                "{name}: depth_input is {} but depth channels were {}",
                config.depth_input,
                if depth_channels.is_some() { "given" } else { "not given" }
            )));
        }
        let n = config.n;
        let k = config.projection_kernel;
        let g = ParamGroup::Head;
        let local_proj = ConvBnRelu::new(&join(name, "local_proj"), local_channels, n, k, 1, g, rng)?;
        let global_proj = ConvBnRelu::new(&join(name, "global_proj"), global_channels, n, k, 1, g, rng)?;
        let depth_proj = depth_channels
            .map(|c| ConvBnRelu::new(&join(name, "depth_proj"), c, n, k, 1, g, rng))
            .transpose()?;
        let attention = config
            .enable_cross_attention
            .then(|| Conv2d::new(&join(name, "attention"), n, 1, 1, 1, 1, true, g, rng))
            .transpose()?;
        let fused = config.streams() * n;
        let reduce_in = if config.enable_channel_attention {
            2 * fused
        } else {
            fused
        };
        let channel_reduce = Conv2d::new(&join(name, "channel_reduce"), reduce_in, n, 1, 1, 1, true, g, rng)?;
        let branches = if config.enable_multiscale {
            config
                .branches()
                .iter()
                .enumerate()
                .map(|(i, &(_, dil))| Conv2d::new(&join(name, &format!("branch{i}")), n, n, 3, 1, dil, true, g, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (global_attention, fusion) = if config.enable_attentive_fusion {
            (
                Some(Conv2d::new(
                    &join(name, "global_attention"),
                    n,
                    1,
                    1,
                    1,
                    1,
                    true,
                    g,
                    rng,
                )?),
                Some(Conv2d::new(&join(name, "fusion"), 2 * n, n, 1, 1, 1, true, g, rng)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            local_proj,
            global_proj,
            depth_proj,
            attention,
            channel_reduce,
            branches,
            global_attention,
            fusion,
        })
    }

    pub fn cross_attention<'t>(
        &self,
        s: &Session<'t>,
        f_l: Var<'t>,
        f_g: Var<'t>,
        d_l: Option<Var<'t>>,
    ) -> Result<CrossAttention<'t>> {
        let (bl, _, hl, wl) = dims4(&f_l.shape(), "cross_attention")?;
        let (bg, _, hg, wg) = dims4(&f_g.shape(), "cross_attention")?;
        if bl != bg {
            return Err(Error::shape(
                "cross_attention",
                format!("batch sizes differ: {bl} vs {bg}"),
            ));
        }
        let ratio = if hg > 0 && hl % hg == 0 { hl / hg } else { 0 };
        if ratio == 0 || wl != wg * ratio {
            return Err(Error::shape(
                "cross_attention",
                format!("global {hg}x{wg} is not an integer downscale of local {hl}x{wl}"),
            ));
        }
        let depth = match (d_l, &self.depth_proj) {
            (Some(d), Some(proj)) => {
                let (bd, _, hd, wd) = dims4(&d.shape(), "cross_attention")?;
                if (bd, hd, wd) != (bl, hl, wl) {
                    return Err(Error::shape(
                        "cross_attention",
                        format!("depth {:?} does not align with local {:?}", d.shape(), f_l.shape()),
                    ));
                }
                Some(proj.forward(s, d)?)
            }
            (Some(_), None) => {
                return Err(Error::Config("depth features given but depth_input is disabled".into()));
            }
            (None, Some(_)) => {
                return Err(Error::Config(
                    "depth_input is enabled but no depth features were given".into(),
                ));
            }
            (None, None) => None,
        };
        let local = self.local_proj.forward(s, f_l)?;
        let global = self
            .global_proj
            .forward(s, f_g.upsample(ratio, self.config.upsample_mode)?)?;

        let mut projected = vec![local, global];
        projected.extend(depth);
        let (attention, streams) = match &self.attention {
            Some(conv) => {
                let mut sum = local.add(global)?;
                if let Some(d) = depth {
                    sum = sum.add(d)?;
                }
                let a = conv.forward(s, sum)?.sigmoid();
                let streams = projected
                    .iter()
                    .map(|&p| p.mul(a)?.add(p))
                    .collect::<Result<Vec<_>>>()?;
                (Some(a), streams)
            }
            None => (None, projected),
        };
        let fused = Var::concat_channels(&streams)?;
        Ok(CrossAttention {
            local,
            global,
            depth,
            attention,
            streams,
            fused,
        })
    }

    pub fn channel_attention<'t>(&self, s: &Session<'t>, f_lg: Var<'t>) -> Result<Var<'t>> {
        let input = if self.config.enable_channel_attention {
            let weights = f_lg.global_avg_pool()?;
            Var::concat_channels(&[f_lg.mul(weights)?, f_lg])?
        } else {
            f_lg
        };
        self.channel_reduce.forward(s, input)
    }

    pub fn multi_scale<'t>(&self, s: &Session<'t>, f_ch: Var<'t>) -> Result<Var<'t>> {
        if !self.config.enable_multiscale {
            return Ok(f_ch);
        }
        let (_, _, h, w) = dims4(&f_ch.shape(), "multi_scale")?;
        let mut total: Option<Var<'t>> = None;
        for (conv, (rate, _)) in self.branches.iter().zip(self.config.branches()) {
            let (hp, wp) = (h.div_ceil(rate) * rate, w.div_ceil(rate) * rate);
            let down = f_ch.pad_to(hp, wp)?.downsample_avg(rate)?;
            let branch = conv
                .forward(s, down)?
                .upsample(rate, self.config.upsample_mode)?
                .crop(h, w)?;
            total = Some(match total {
                Some(t) => t.add(branch)?,
                None => branch,
            });
        }
        Ok(total.unwrap_or(f_ch))
    }

    /// `global` is the projected global stream from the cross-attention block.
    pub fn attentive_fusion<'t>(
        &self,
        s: &Session<'t>,
        f_ms: Var<'t>,
        global: Var<'t>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        match (&self.global_attention, &self.fusion) {
            (Some(att), Some(fusion)) => {
                let a_g = att.forward(s, global)?.sigmoid();
                let attended = global.mul(a_g)?.add(global)?;
                let out = fusion.forward(s, Var::concat_channels(&[attended, f_ms])?)?;
                Ok((out, Some(a_g)))
            }
            _ => Ok((f_ms, None)),
        }
    }

    pub fn forward_trace<'t>(
        &self,
        s: &Session<'t>,
        f_local: Var<'t>,
        f_global: Var<'t>,
        d_local: Option<Var<'t>>,
    ) -> Result<CraceTrace<'t>> {
        let cross = self.cross_attention(s, f_local, f_global, d_local)?;
        let channel = self.channel_attention(s, cross.fused)?;
        let multiscale = self.multi_scale(s, channel)?;
        let (output, global_attention) = self.attentive_fusion(s, multiscale, cross.global)?;
        Ok(CraceTrace {
            cross,
            channel,
            multiscale,
            global_attention,
            output,
        })
    }

    pub fn forward<'t>(
        &self,
        s: &Session<'t>,
        f_local: Var<'t>,
        f_global: Var<'t>,
        d_local: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_trace(s, f_local, f_global, d_local)?.output)
    }
}

impl Module for CraceModule {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.local_proj.visit(f);
        self.global_proj.visit(f);
        if let Some(m) = &self.depth_proj {
            m.visit(f);
        }
        if let Some(m) = &self.attention {
            m.visit(f);
        }
        self.channel_reduce.visit(f);
        for b in &self.branches {
            b.visit(f);
        }
        if let Some(m) = &self.global_attention {
            m.visit(f);
        }
        if let Some(m) = &self.fusion {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.local_proj.visit_mut(f);
        self.global_proj.visit_mut(f);
        if let Some(m) = &mut self.depth_proj {
            m.visit_mut(f);
        }
        if let Some(m) = &mut self.attention {
            m.visit_mut(f);
        }
        self.channel_reduce.visit_mut(f);
        for b in &mut self.branches {
            b.visit_mut(f);
        }
        if let Some(m) = &mut self.global_attention {
            m.visit_mut(f);
        }
        if let Some(m) = &mut self.fusion {
            m.visit_mut(f);
        }
    }
}
