//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! appended after their parents, so the tape is already in topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! Gradients accumulate into leaves across repeated `backward` calls until
//! [`Tape::zero_grads`] is called.

pub(crate) mod kernels;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::{ConvSpec, UpsampleMode};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    Log(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    SumAll(usize),
    SumAxes(usize),
    Concat(Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Rc<Vec<f64>>,
        inv_std: Rc<Vec<f64>>,
    },
    Upsample {
        x: usize,
        factor: usize,
        mode: UpsampleMode,
    },
    AvgPool {
        x: usize,
        factor: usize,
    },
    Pad(usize),
    Crop(usize),
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations for one forward/backward pass.
///
/// A tape is confined to a single thread; independent tapes can run on
/// separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` for non-leaves and for leaves
    /// that do not require gradients. A leaf that requires gradients but
    /// has no path to any loss reports zeros.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &node.grad {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape tracks value shape"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires gradients,
    /// adding into the leaves' accumulated gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.numel() != 1 {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.value.shape()
                )));
            }
            let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            adjoints[loss.id] = Some(vec![1.0]);
            for id in (0..=loss.id).rev() {
                let Some(upstream) = adjoints[id].take() else {
                    continue;
                };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, upstream));
                    continue;
                }
                let value_of = |p: usize| nodes[p].value.as_ref();
                for (parent, contribution) in ops::backward_rule(&node.op, &node.value, &upstream, &value_of) {
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    match &mut adjoints[parent] {
                        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// The accumulated gradient when this is a leaf.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op}: operands live on different tapes")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let loss = x.mul_scalar(3.0).sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0, 6.0]);
        tape.zero_grads();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zeros() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones([2, 2]));
        let y = tape.param(Tensor::ones([3]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(y.grad().unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_report_no_grad() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::ones([2]));
        let x = tape.param(Tensor::ones([2]));
        tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.param(Tensor::ones([1]));
        let y = b.param(Tensor::ones([1]));
        assert!(x.add(y).is_err());
    }
}
