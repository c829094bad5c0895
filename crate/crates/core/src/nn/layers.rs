use rand::Rng;

use super::{join, kaiming_normal, BnObservation, Mode, Module, Param, ParamGroup, Session};
use crate::autodiff::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    /// Kaiming-initialised convolution with "same"-style padding
    /// `dilation * (kernel - 1) / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || stride == 0 || dilation == 0 {
            return Err(Error::Config(format!(
                "{name}: channels, stride and dilation must be positive"
            )));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size {kernel} must be odd")));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(
            join(name, "weight"),
            kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            group,
        );
        let bias = bias.then(|| Param::new(join(name, "bias"), Tensor::zeros([out_channels]), group));
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            weight,
            bias,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            stride: self.stride,
            padding: self.dilation * (self.kernel - 1) / 2,
            dilation: self.dilation,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = dims4(&x.shape(), "conv2d")?;
        if c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "{}: expected {} input channels, got {c}",
                    self.weight.name, self.in_channels
                ),
            ));
        }
        let w = s.bind(&self.weight);
        let b = self.bias.as_ref().map(|b| s.bind(b));
        x.conv2d(w, b, self.spec())
    }

    /// Zeroes weights and bias.
    pub fn zero(&mut self) {
        self.weight.value.data_mut().fill(0.0);
        if let Some(b) = &mut self.bias {
            b.value.data_mut().fill(0.0);
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, group: ParamGroup) -> Self {
        Self {
            name: name.to_string(),
            channels,
            gamma: Param::new(join(name, "gamma"), Tensor::ones([channels]), group),
            beta: Param::new(join(name, "beta"), Tensor::zeros([channels]), group),
            running_mean: Param::new(
                join(name, "running_mean"),
                Tensor::zeros([channels]),
                ParamGroup::Buffer,
            ),
            running_var: Param::new(join(name, "running_var"), Tensor::ones([channels]), ParamGroup::Buffer),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = s.bind(&self.gamma);
        let beta = s.bind(&self.beta);
        match s.mode() {
            Mode::Train => {
                let (y, mean, var) = x.batchnorm_train(gamma, beta, BN_EPS)?;
                let shape = x.shape();
                let count = (shape[0] * shape[2] * shape[3]) as f64;
                let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
                s.observe(BnObservation {
                    layer: self.name.clone(),
                    mean,
                    var: unbiased,
                });
                Ok(y)
            }
            Mode::Eval => {
                let c = self.channels;
                let mean = s.constant(self.running_mean.value.clone().reshape([1, c, 1, 1])?);
                let inv_std = s.constant(
                    self.running_var
                        .value
                        .map(|v| 1.0 / (v + BN_EPS).sqrt())
                        .reshape([1, c, 1, 1])?,
                );
                let gamma = gamma.reshape(&[1, c, 1, 1])?;
                let beta = beta.reshape(&[1, c, 1, 1])?;
                x.sub(mean)?.mul(inv_std)?.mul(gamma)?.add(beta)
            }
        }
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Convolution, batch normalisation, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                &join(name, "conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                1,
                false,
                group,
                rng,
            )?,
            bn: BatchNorm2d::new(&join(name, "bn"), out_channels, group),
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_pre_relu(s, x)?.relu())
    }

    /// Convolution and normalisation without the final ReLU.
    pub fn forward_pre_relu<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}
