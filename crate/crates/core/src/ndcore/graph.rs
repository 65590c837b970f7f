//! Recording tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so creation order is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use super::{ops, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    Relu(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, factor: usize },
    Concat(Vec<Var>),
    Softmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, target: Tensor<T>, weights: Option<Tensor<T>> },
    SoftDice { probs: Var, target: Tensor<T>, smooth: f64 },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf without gradient tracking.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. a parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        if cfg!(debug_assertions) {
            value.ensure_finite(name)?;
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        self.record(y, Op::Conv2d { input, weight, bias, stride, pad }, &[input, weight, bias], "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.record(y, Op::Relu(x), &[x], "relu")
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2(self.value(x))?;
        self.record(y, Op::MaxPool2 { input: x, argmax }, &[x], "maxpool2")
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(x), factor)?;
        self.record(y, Op::Upsample { input: x, factor }, &[x], "upsample_nearest")
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&tensors)?;
        self.record(y, Op::Concat(parts.to_vec()), parts, "concat_channels")
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_channel(self.value(x))?;
        self.record(y, Op::Softmax(x), &[x], "softmax_channel")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        self.record(y, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        self.record(y, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let y = ops::scale(self.value(a), factor);
        self.record(y, Op::Scale(a, factor), &[a], "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = ops::sum(self.value(a));
        self.record(y, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let y = ops::mean(self.value(a));
        self.record(y, Op::Mean(a), &[a], "mean")
    }

    /// Pixel-weighted cross-entropy of `logits` against a constant target.
    pub fn cross_entropy(&mut self, logits: Var, target: Tensor<T>, weights: Option<Tensor<T>>) -> Result<Var> {
        let y = ops::cross_entropy(self.value(logits), &target, weights.as_ref())?;
        self.record(y, Op::CrossEntropy { logits, target, weights }, &[logits], "cross_entropy")
    }

    /// Soft Dice loss of `probs` against a constant target.
    pub fn soft_dice(&mut self, probs: Var, target: Tensor<T>, smooth: f64) -> Result<Var> {
        let y = ops::soft_dice(self.value(probs), &target, smooth)?;
        self.record(y, Op::SoftDice { probs, target, smooth }, &[probs], "soft_dice")
    }

    /// Back-propagates from the scalar `loss`, storing gradients on every
    /// parameter leaf. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Validation("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let mut pending: Vec<(Var, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let need_input = self.nodes[input.0].needs_grad;
                    let (gx, gw, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        self.value(*bias),
                        *stride,
                        *pad,
                        &gy,
                        need_input,
                    )?;
                    if let Some(gx) = gx {
                        pending.push((*input, gx));
                    }
                    pending.push((*weight, gw));
                    pending.push((*bias, gb));
                }
                Op::Relu(x) => pending.push((*x, ops::relu_backward(self.value(*x), &gy))),
                Op::MaxPool2 { input, argmax } => {
                    pending.push((*input, ops::maxpool2_backward(self.value(*input).shape(), argmax, &gy)));
                }
                Op::Upsample { input, factor } => {
                    pending.push((*input, ops::upsample_nearest_backward(self.value(*input).shape(), *factor, &gy)));
                }
                Op::Concat(parts) => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|&v| self.value(v).shape().to_vec()).collect();
                    for (v, g) in parts.iter().zip(ops::concat_channels_backward(&shapes, &gy)) {
                        pending.push((*v, g));
                    }
                }
                Op::Softmax(x) => pending.push((*x, ops::softmax_channel_backward(&node.value, &gy)?)),
                Op::Add(a, b) => {
                    pending.push((*a, gy.clone()));
                    pending.push((*b, gy));
                }
                Op::Mul(a, b) => {
                    pending.push((*a, ops::mul(&gy, self.value(*b))?));
                    pending.push((*b, ops::mul(&gy, self.value(*a))?));
                }
                Op::Scale(a, f) => pending.push((*a, ops::scale(&gy, *f))),
                Op::Sum(a) => pending.push((*a, Tensor::full(self.value(*a).shape().to_vec(), gy.item()))),
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let g = T::lit(gy.item().as_f64() / x.numel().max(1) as f64);
                    pending.push((*a, Tensor::full(x.shape().to_vec(), g)));
                }
                Op::CrossEntropy { logits, target, weights } => {
                    let g = ops::cross_entropy_backward(self.value(*logits), target, weights.as_ref(), gy.item().as_f64())?;
                    pending.push((*logits, g));
                }
                Op::SoftDice { probs, target, smooth } => {
                    let g = ops::soft_dice_backward(self.value(*probs), target, *smooth, gy.item().as_f64())?;
                    pending.push((*probs, g));
                }
            }
            for (v, g) in pending {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if node.value.requires_grad() {
                    node.value.set_grad(g.into_data());
                }
            }
        }
        Ok(())
    }
}

/// Execution strategy for network forwards: recorded ([`Graph`]) or eager.
pub trait Exec<T: Scalar> {
    type Value;

    fn constant(&mut self, value: Tensor<T>) -> Self::Value;
    fn parameter(&mut self, value: &Tensor<T>) -> Self::Value;
    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, stride: usize, pad: usize) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn maxpool2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn upsample_nearest(&mut self, x: &Self::Value, factor: usize) -> Result<Self::Value>;
    fn concat_channels(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;
}

impl<T: Scalar> Exec<T> for Graph<T> {
    type Value = Var;

    fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value)
    }

    fn parameter(&mut self, value: &Tensor<T>) -> Var {
        self.param(value.clone())
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        Graph::conv2d(self, *x, *w, *b, stride, pad)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        Graph::relu(self, *x)
    }

    fn maxpool2(&mut self, x: &Var) -> Result<Var> {
        Graph::maxpool2(self, *x)
    }

    fn upsample_nearest(&mut self, x: &Var, factor: usize) -> Result<Var> {
        Graph::upsample_nearest(self, *x, factor)
    }

    fn concat_channels(&mut self, parts: &[&Var]) -> Result<Var> {
        let vars: Vec<Var> = parts.iter().map(|v| **v).collect();
        Graph::concat_channels(self, &vars)
    }
}

/// Evaluation without recording anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Scalar> Exec<T> for Eager {
    type Value = Tensor<T>;

    fn constant(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn parameter(&mut self, value: &Tensor<T>) -> Tensor<T> {
        value.clone()
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        ops::conv2d(x, w, b, stride, pad)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::relu(x))
    }

    fn maxpool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::maxpool2(x)?.0)
    }

    fn upsample_nearest(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        ops::upsample_nearest(x, factor)
    }

    fn concat_channels(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        ops::concat_channels(parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
        let x = g.param(Tensor::from_f64([2], &[1.0, 1.0]).unwrap());
        let y = g.mul(c, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_runs_once_and_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn all_negative_relu_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([3], &[-1.0, -0.5, -2.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_values_are_rejected_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([1], &[1.0]).unwrap());
        assert!(matches!(g.scale(x, f64::INFINITY), Err(Error::Numeric(_))));
    }
}
