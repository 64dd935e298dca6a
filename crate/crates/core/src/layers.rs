//! Binding of stored convolution weights into a forward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Gradients, Var};
use crate::error::Result;
use crate::tensor::{ConvWeights, Scalar, Shape, Tensor};

/// Gradient of one convolution's parameters.
#[derive(Clone, Debug)]
pub struct ConvGrad<T> {
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

/// Turns stored [`ConvWeights`] into graph variables during a forward pass.
///
/// In inference mode the weights enter as constants and nothing is
/// retained. In training mode each convolution's kernel and bias become
/// differentiable leaves, remembered by weight name so gradients can be
/// collected after back-propagation.
pub struct Binder<T: Scalar> {
    track: bool,
    bound: Vec<(String, Var<T>, Option<Var<T>>)>,
}

impl<T: Scalar> Binder<T> {
    pub fn inference() -> Self {
        Binder {
            track: false,
            bound: Vec::new(),
        }
    }

    pub fn training() -> Self {
        Binder {
            track: true,
            bound: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.track
    }

    pub fn conv(&mut self, x: &Var<T>, w: &ConvWeights<T>) -> Result<Var<T>> {
        let wrap = |t: Tensor<T>| {
            if self.track {
                Var::leaf(t)
            } else {
                Var::constant(t)
            }
        };
        let kernel = wrap(w.kernel.clone());
        let bias = w.bias.as_ref().map(|b| {
            wrap(Tensor::from_parts(Shape::new(1, b.len(), 1, 1), b.clone()))
        });
        let y = x.conv2d(&kernel, bias.as_ref(), w.stride, w.padding, w.groups)?;
        if self.track {
            self.bound.push((w.name.clone(), kernel, bias));
        }
        Ok(y)
    }

    /// Parameter gradients keyed by weight name. Weights used more than once
    /// have their contributions summed.
    pub fn collect(&self, grads: &Gradients<T>) -> HashMap<String, ConvGrad<T>> {
        let mut out: HashMap<String, ConvGrad<T>> = HashMap::new();
        for (name, k, b) in &self.bound {
            let kernel = grads
                .get(k)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(k.shape()));
            let bias = b.as_ref().map(|b| {
                grads
                    .get(b)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![T::zero(); b.shape().c])
            });
            match out.get_mut(name) {
                Some(acc) => {
                    acc.kernel = acc.kernel.add(&kernel).expect("same weight shape");
                    if let (Some(a), Some(b)) = (acc.bias.as_mut(), bias) {
                        a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
                    }
                }
                None => {
                    out.insert(name.clone(), ConvGrad { kernel, bias });
                }
            }
        }
        out
    }
}

/// He-uniform initialised convolution with zero bias and "same" padding.
pub fn he_uniform<T: Scalar>(
    name: impl Into<String>,
    c_in: usize,
    c_out: usize,
    k: usize,
    groups: usize,
    rng: &mut (impl Rng + ?Sized),
) -> ConvWeights<T> {
    let mut w = ConvWeights::zeros(name, c_in, c_out, k, groups);
    let fan_in = (c_in / groups * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    for v in w.kernel.data_mut() {
        *v = T::lit(rng.random_range(-bound..bound));
    }
    w
}
