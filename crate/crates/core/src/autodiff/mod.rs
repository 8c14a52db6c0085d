//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and the information its backward rule needs. Nodes are
//! appended in execution order, so inputs always precede the operations that
//! consume them and [`Tape::backward`] can walk the record once in reverse.
//!
//! ```
//! use srseg::autodiff::Tape;
//! use srseg::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod basic;
mod conv;
mod loss_ops;
mod norm;
mod resize;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use conv::conv_out_extent;
pub use norm::{BatchNormState, BatchStats, BnMode, BN_EPS, BN_MOMENTUM};
pub use resize::resize_coords;

/// Channel softmax of a `[B, C, ...]` tensor, outside any tape.
pub fn channel_softmax_values<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    basic::softmax_values(x, false)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: conv::ConvGeom,
        cols: Vec<T>,
    },
    Resize {
        input: Var,
        map: resize::ResizeMap<T>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Nll {
        logp: Var,
        targets: Vec<usize>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// A constant input; no gradient is ever produced for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by previous [`Tape::backward`] calls, or
    /// `None` when no backward path reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push_raw(value, requires_grad, op)
    }

    /// Reverse sweep from a scalar `loss`. Gradients add onto whatever earlier
    /// calls left behind; call [`Tape::zero_grad`] to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Seed into a separate buffer so repeated calls accumulate additively.
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(upstream) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                self.propagate(i, &upstream, &mut pending);
            }
            match &mut self.grads[i] {
                Some(g) => g
                    .data_mut()
                    .iter_mut()
                    .zip(upstream.data())
                    .for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(upstream),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, upstream: &Tensor<T>, pending: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let mut sink = GradSink {
            nodes: &self.nodes,
            pending,
        };
        let dy = upstream.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => conv::conv2d_backward(self, &mut sink, *input, *weight, *bias, geom, cols, dy),
            Op::Resize { input, map } => resize::resize_backward(&mut sink, *input, map, dy),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => norm::bn_train_backward(self, &mut sink, *input, *gamma, *beta, xhat, inv_std, dy),
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => norm::bn_eval_backward(self, &mut sink, *input, *gamma, *beta, mean, inv_std, dy),
            Op::Relu(a) => basic::relu_backward(self, &mut sink, *a, dy),
            Op::Linear { input, weight, bias } => basic::linear_backward(self, &mut sink, *input, *weight, *bias, dy),
            Op::GlobalAvgPool(a) => basic::gap_backward(self, &mut sink, *a, dy),
            Op::Add(a, b) => {
                sink.add(*a, |g| axpy(g, dy, T::one()));
                sink.add(*b, |g| axpy(g, dy, T::one()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                sink.add(*a, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *g = *g + d * o;
                    }
                });
                sink.add(*b, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *g = *g + d * o;
                    }
                });
            }
            Op::Scale(a, s) => sink.add(*a, |g| axpy(g, dy, *s)),
            Op::Log(a) => {
                let av = self.value(*a).data();
                sink.add(*a, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        *g = *g + d / x;
                    }
                });
            }
            Op::Sum(a) => {
                let d = dy[0];
                sink.add(*a, |g| g.iter_mut().for_each(|g| *g = *g + d));
            }
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).len() as f64);
                let d = dy[0] / n;
                sink.add(*a, |g| g.iter_mut().for_each(|g| *g = *g + d));
            }
            Op::Softmax(a) => basic::softmax_backward(&mut sink, *a, &node.value, dy),
            Op::LogSoftmax(a) => basic::log_softmax_backward(&mut sink, *a, &node.value, dy),
            Op::Concat(inputs) => basic::concat_backward(self, &mut sink, inputs, dy),
            Op::Nll { logp, targets } => loss_ops::nll_backward(self, &mut sink, *logp, targets, dy),
            Op::BceLogits { logits, labels } => loss_ops::bce_backward(self, &mut sink, *logits, labels, dy),
        }
    }
}

/// Accumulates input gradients during one backward step.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    pending: &'a mut [Option<Tensor<T>>],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `f` on `v`'s pending gradient buffer if `v` needs one.
    pub fn add(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut self.pending[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(buf.data_mut());
    }
}

pub(crate) fn axpy<T: Real>(acc: &mut [T], x: &[T], s: T) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + s * v;
    }
}

pub(crate) fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let d = tape.detach(x);
        let p = tape.mul(x, d).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        // only the non-detached factor contributes: d/dx (x * const) = const
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
        assert!(tape.grad(d).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.0]));
        let a = tape.sum(x);
        let sq = tape.mul(x, x).unwrap();
        let b = tape.sum(sq);
        tape.backward(a).unwrap();
        tape.backward(b).unwrap();
        let separate = tape.grad(x).unwrap().clone();

        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(t(&[2], &[3.0, -1.0]));
        let a2 = tape2.sum(x2);
        let sq2 = tape2.mul(x2, x2).unwrap();
        let b2 = tape2.sum(sq2);
        let total = tape2.add(a2, b2).unwrap();
        tape2.backward(total).unwrap();
        assert!(separate.max_abs_diff(tape2.grad(x2).unwrap()) < 1e-10);
    }

    #[test]
    fn unreached_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.0]));
        let y = tape.leaf(t(&[1], &[2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
    }
}
