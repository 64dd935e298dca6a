//! Reverse-mode differentiation over the fixed primitive set in
//! [`crate::tensor::grad`].
//!
//! A [`Var`] remembers the operation that produced it only when one of its
//! inputs requires a gradient, so inference through the same code path
//! keeps no intermediate values alive.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::grad::{self, Op};
use crate::tensor::{split_index, Scalar, Shape, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    origin: Option<(Op, Vec<Var<T>>)>,
}

#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn node(value: Tensor<T>, requires_grad: bool, origin: Option<(Op, Vec<Var<T>>)>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            origin,
        }))
    }

    /// A value that gradients do not flow into.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::node(value, false, None)
    }

    /// A differentiable leaf.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::node(value, true, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn into_value(self) -> Tensor<T> {
        match Rc::try_unwrap(self.0) {
            Ok(node) => node.value,
            Err(rc) => rc.value.clone(),
        }
    }

    /// Applies a single-output primitive.
    pub fn apply(op: Op, inputs: &[&Var<T>]) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| v.value()).collect();
        let mut outs = grad::forward(&op, &values)?;
        if outs.len() != 1 {
            return Err(Error::invalid(op.name(), "multi-output op applied to a single Var"));
        }
        let value = outs.pop().expect("one output");
        let track = inputs.iter().any(|v| v.requires_grad());
        let origin = track.then(|| (op, inputs.iter().map(|&v| v.clone()).collect()));
        Ok(Self::node(value, track, origin))
    }

    pub fn conv2d(
        &self,
        kernel: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let op = Op::Conv2d {
            stride,
            padding,
            groups,
        };
        match bias {
            Some(b) => Self::apply(op, &[self, kernel, b]),
            None => Self::apply(op, &[self, kernel]),
        }
    }

    pub fn relu(&self) -> Result<Var<T>> {
        Self::apply(Op::Relu, &[self])
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        Self::apply(Op::Add, &[self, other])
    }

    pub fn shift(&self, offsets: &[f64]) -> Result<Var<T>> {
        Self::apply(Op::Shift(offsets.to_vec()), &[self])
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<T>> {
        Self::apply(Op::ChannelSlice { start, len }, &[self])
    }

    /// First `round(alpha * C)` channels and the rest.
    pub fn split(&self, alpha: f64) -> Result<(Var<T>, Var<T>)> {
        let c = self.shape().c;
        let k = split_index(alpha, c)?;
        Ok((self.slice_channels(0, k)?, self.slice_channels(k, c - k)?))
    }

    pub fn concat(&self, other: &Var<T>) -> Result<Var<T>> {
        Self::apply(Op::Concat, &[self, other])
    }

    pub fn channel_shuffle(&self, groups: usize) -> Result<Var<T>> {
        Self::apply(Op::ChannelShuffle(groups), &[self])
    }

    pub fn gather(&self, indices: Vec<usize>) -> Result<Var<T>> {
        Self::apply(Op::ChannelGather(indices), &[self])
    }

    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<T>> {
        Self::apply(Op::PixelShuffle(r), &[self])
    }

    pub fn l1_loss(&self, target: &Var<T>) -> Result<Var<T>> {
        Self::apply(Op::L1Loss, &[self, target])
    }

    /// Back-propagates from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value().len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be a scalar, got {}", self.shape()),
            ));
        }
        let seed = Tensor::full(self.shape(), T::one());
        self.backward_with(seed)
    }

    /// Back-propagates an arbitrary output cotangent.
    pub fn backward_with(&self, cotangent: Tensor<T>) -> Result<Gradients<T>> {
        self.value().expect_same_shape(&cotangent, "backward")?;
        let order = self.topo_order();
        let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
        grads.insert(self.id(), cotangent);
        for var in order.iter().rev() {
            let Some((op, parents)) = &var.0.origin else {
                continue;
            };
            let Some(dy) = grads.get(&var.id()).cloned() else {
                continue;
            };
            let values: Vec<&Tensor<T>> = parents.iter().map(|p| p.value()).collect();
            let dxs = grad::vjp(op, &values, &[&dy])?;
            for (p, dx) in parents.iter().zip(dxs) {
                if !p.requires_grad() {
                    continue;
                }
                match grads.get_mut(&p.id()) {
                    Some(acc) => {
                        acc.data_mut()
                            .iter_mut()
                            .zip(dx.data())
                            .for_each(|(a, &d)| *a += d);
                    }
                    None => {
                        grads.insert(p.id(), dx);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Nodes reachable through tracked edges, parents before children.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            if let Some((_, parents)) = &v.0.origin {
                for p in parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Cotangents of every tracked variable reached during back-propagation.
pub struct Gradients<T> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        // loss = mean(|x + x|) = 2 * |x| for a single element
        let x = Var::leaf(Tensor::<f64>::full([1, 1, 1, 1], 3.0));
        let y = x.add(&x).unwrap();
        let zero = Var::constant(Tensor::zeros([1, 1, 1, 1]));
        let g = y.l1_loss(&zero).unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn constants_are_not_tracked() {
        let x = Var::constant(Tensor::<f32>::full([1, 1, 2, 2], 1.0));
        let y = x.relu().unwrap();
        assert!(!y.requires_grad());
        let g = y
            .l1_loss(&Var::constant(Tensor::zeros([1, 1, 2, 2])))
            .unwrap()
            .backward()
            .unwrap();
        assert!(g.get(&x).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = Var::leaf(Tensor::<f64>::zeros([1, 1, 2, 2]));
        assert!(x.relu().unwrap().backward().is_err());
    }
}
