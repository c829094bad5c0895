//! Layer vocabulary: parameters, the forward session, convolution, batch
//! normalisation and morphology.

mod layers;
pub mod morphology;

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu, BN_EPS, BN_MOMENTUM};
pub use morphology::erode;

/// Which learning rate a parameter trains with; buffers are not trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, group: ParamGroup) -> Self {
        Self {
            name: name.into(),
            value,
            group,
        }
    }

    pub fn trainable(&self) -> bool {
        self.group != ParamGroup::Buffer
    }
}

/// Anything that owns parameters. Visit order is fixed and defines the
/// checkpoint layout.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable() {
                n += p.value.numel()
            }
        });
        n
    }

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers; gradients tracked.
    Train,
    /// Running statistics; no gradients unless requested.
    Eval,
}

/// Batch statistics observed by one normalisation layer during a training
/// forward pass.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

/// One forward pass: a tape plus the bindings of parameters onto it.
pub struct Session<'t> {
    tape: &'t Tape,
    mode: Mode,
    track_grads: bool,
    bound: RefCell<HashMap<String, Var<'t>>>,
    order: RefCell<Vec<String>>,
    observations: RefCell<Vec<BnObservation>>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t Tape, mode: Mode) -> Self {
        Self::with_grads(tape, mode, mode == Mode::Train)
    }

    pub fn with_grads(tape: &'t Tape, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape,
            mode,
            track_grads,
            bound: RefCell::default(),
            order: RefCell::default(),
            observations: RefCell::default(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Places a parameter on the tape, reusing the leaf if it is already bound.
    pub fn bind(&self, p: &Param) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&p.name) {
            return *v;
        }
        let v = self.tape.leaf(p.value.clone(), self.track_grads && p.trainable());
        self.bound.borrow_mut().insert(p.name.clone(), v);
        self.order.borrow_mut().push(p.name.clone());
        v
    }

    /// Binds the parameter `name` to an existing variable; later `bind`
    /// calls for that parameter return it. Fails if it is already bound.
    pub fn bind_to(&self, name: &str, var: Var<'t>) -> Result<()> {
        if self.bound.borrow().contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} is already bound")));
        }
        self.bound.borrow_mut().insert(name.to_string(), var);
        self.order.borrow_mut().push(name.to_string());
        Ok(())
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Accumulated gradient of a bound parameter.
    pub fn grad(&self, name: &str) -> Option<Tensor> {
        self.bound.borrow().get(name).and_then(|v| v.grad())
    }

    /// Names of bound parameters in binding order.
    pub fn bound_names(&self) -> Vec<String> {
        self.order.borrow().clone()
    }

    pub(crate) fn observe(&self, obs: BnObservation) {
        self.observations.borrow_mut().push(obs);
    }

    pub fn observations(&self) -> Vec<BnObservation> {
        self.observations.borrow().clone()
    }
}

/// Folds observed batch statistics into the running buffers of `module`.
pub fn update_running_stats<M: Module + ?Sized>(module: &mut M, observations: &[BnObservation]) {
    if observations.is_empty() {
        return;
    }
    let by_name: HashMap<String, &BnObservation> = observations.iter().map(|o| (o.layer.clone(), o)).collect();
    module.visit_mut(&mut |p| {
        let (layer, is_mean) = if let Some(l) = p.name.strip_suffix(".running_mean") {
            (l, true)
        } else if let Some(l) = p.name.strip_suffix(".running_var") {
            (l, false)
        } else {
            return;
        };
        if let Some(obs) = by_name.get(layer) {
            let batch = if is_mean { &obs.mean } else { &obs.var };
            for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    });
}

/// Kaiming (He) normal initialisation: `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
