//! Vector-Jacobian products for the primitive operations.

use super::conv::{conv2d_backward_raw, conv2d_raw, Geometry};
use super::layout::{channel_scatter_add, channel_slice, pixel_unshuffle, shuffle_sources};
use super::{
    bicubic_resize, bilinear_resize, channel_gather, channel_split, concat_channels, pixel_shuffle,
    split_index, Scalar, Shape, Tensor,
};
use crate::error::{Error, Result};

/// One instance of a primitive operation, including its static arguments.
///
/// Differentiable inputs are passed separately to [`forward`] and [`vjp`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Inputs: `x`, kernel, and optionally bias as a `(1, C_out, 1, 1)` tensor.
    Conv2d {
        stride: usize,
        padding: usize,
        groups: usize,
    },
    PixelShuffle(usize),
    /// Two outputs: active and idle channels.
    ChannelSplit(f64),
    /// Channels `[start, start + len)`.
    ChannelSlice { start: usize, len: usize },
    Concat,
    ChannelShuffle(usize),
    ChannelGather(Vec<usize>),
    Relu,
    Add,
    /// Per-channel constant offset.
    Shift(Vec<f64>),
    /// Mean absolute error; inputs `pred`, `target`; output `(1, 1, 1, 1)`.
    L1Loss,
    BilinearResize(f64),
    BicubicResize(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::PixelShuffle(_) => "pixel_shuffle",
            Op::ChannelSplit(_) => "channel_split",
            Op::ChannelSlice { .. } => "channel_slice",
            Op::Concat => "concat_channels",
            Op::ChannelShuffle(_) => "channel_shuffle",
            Op::ChannelGather(_) => "channel_gather",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Shift(_) => "shift",
            Op::L1Loss => "l1_loss",
            Op::BilinearResize(_) => "bilinear_resize",
            Op::BicubicResize(_) => "bicubic_resize",
        }
    }
}

fn arity(op: &'static str, inputs: usize, want: &[usize]) -> Result<()> {
    if want.contains(&inputs) {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("expected {want:?} inputs, got {inputs}")))
    }
}

/// Mean absolute error as a `(1, 1, 1, 1)` tensor.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    pred.expect_same_shape(target, "l1_loss")?;
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum();
    let mean = sum / T::from_usize(pred.len()).expect("count");
    Ok(Tensor::from_parts(Shape::new(1, 1, 1, 1), vec![mean]))
}

/// Evaluates `op` on `inputs`.
pub fn forward<T: Scalar>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let name = op.name();
    Ok(match op {
        Op::Conv2d {
            stride,
            padding,
            groups,
        } => {
            arity(name, inputs.len(), &[2, 3])?;
            let g = Geometry {
                stride: *stride,
                padding: *padding,
                groups: *groups,
            };
            vec![conv2d_raw(inputs[0], inputs[1], inputs.get(2).map(|b| b.data()), g)?]
        }
        Op::PixelShuffle(r) => {
            arity(name, inputs.len(), &[1])?;
            vec![pixel_shuffle(inputs[0], *r)?]
        }
        Op::ChannelSplit(alpha) => {
            arity(name, inputs.len(), &[1])?;
            let (a, b) = channel_split(inputs[0], *alpha)?;
            vec![a, b]
        }
        Op::ChannelSlice { start, len } => {
            arity(name, inputs.len(), &[1])?;
            if start + len > inputs[0].shape().c {
                return Err(Error::invalid(name, "slice exceeds channel count"));
            }
            vec![channel_slice(inputs[0], *start, *len)]
        }
        Op::Concat => {
            arity(name, inputs.len(), &[2])?;
            vec![concat_channels(inputs[0], inputs[1])?]
        }
        Op::ChannelShuffle(g) => {
            arity(name, inputs.len(), &[1])?;
            vec![super::channel_shuffle(inputs[0], *g)?]
        }
        Op::ChannelGather(idx) => {
            arity(name, inputs.len(), &[1])?;
            vec![channel_gather(inputs[0], idx)?]
        }
        Op::Relu => {
            arity(name, inputs.len(), &[1])?;
            vec![inputs[0].relu()]
        }
        Op::Add => {
            arity(name, inputs.len(), &[2])?;
            vec![inputs[0].add(inputs[1])?]
        }
        Op::Shift(off) => {
            arity(name, inputs.len(), &[1])?;
            let off: Vec<T> = off.iter().map(|&v| T::lit(v)).collect();
            vec![inputs[0].shift_channels(&off)?]
        }
        Op::L1Loss => {
            arity(name, inputs.len(), &[2])?;
            vec![l1_loss(inputs[0], inputs[1])?]
        }
        Op::BilinearResize(s) => {
            arity(name, inputs.len(), &[1])?;
            vec![bilinear_resize(inputs[0], *s)?]
        }
        Op::BicubicResize(s) => {
            arity(name, inputs.len(), &[1])?;
            vec![bicubic_resize(inputs[0], *s)?]
        }
    })
}

/// Pulls output cotangents back to every input of `op`.
///
/// Returns one cotangent per entry of `inputs`, each shaped like its input.
/// Operations outside the differentiable set return
/// [`Error::Unsupported`] rather than a zero gradient.
pub fn vjp<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    cotangents: &[&Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let name = op.name();
    let one = |dy: &[&Tensor<T>]| -> Result<Tensor<T>> {
        match dy {
            [d] => Ok((*d).clone()),
            _ => Err(Error::invalid(name, format!("expected 1 cotangent, got {}", dy.len()))),
        }
    };
    match op {
        Op::Conv2d {
            stride,
            padding,
            groups,
        } => {
            arity(name, inputs.len(), &[2, 3])?;
            let dy = one(cotangents)?;
            let g = Geometry {
                stride: *stride,
                padding: *padding,
                groups: *groups,
            };
            let grads = conv2d_backward_raw(inputs[0], inputs[1], g, &dy)?;
            let mut out = vec![grads.input, grads.kernel];
            if inputs.len() == 3 {
                let c = grads.bias.len();
                out.push(Tensor::from_parts(Shape::new(1, c, 1, 1), grads.bias));
            }
            Ok(out)
        }
        Op::PixelShuffle(r) => {
            arity(name, inputs.len(), &[1])?;
            let dy = one(cotangents)?;
            Ok(vec![pixel_unshuffle(&dy, *r)])
        }
        Op::ChannelSplit(alpha) => {
            arity(name, inputs.len(), &[1])?;
            let [da, db] = cotangents else {
                return Err(Error::invalid(name, "expected 2 cotangents"));
            };
            split_index(*alpha, inputs[0].shape().c)?;
            Ok(vec![concat_channels(da, db)?])
        }
        Op::ChannelSlice { start, len } => {
            arity(name, inputs.len(), &[1])?;
            let dy = one(cotangents)?;
            let idx: Vec<usize> = (*start..start + len).collect();
            Ok(vec![channel_scatter_add(&dy, &idx, inputs[0].shape().c)])
        }
        Op::Concat => {
            arity(name, inputs.len(), &[2])?;
            let dy = one(cotangents)?;
            let ca = inputs[0].shape().c;
            let cb = inputs[1].shape().c;
            Ok(vec![channel_slice(&dy, 0, ca), channel_slice(&dy, ca, cb)])
        }
        Op::ChannelShuffle(g) => {
            arity(name, inputs.len(), &[1])?;
            let dy = one(cotangents)?;
            let c = inputs[0].shape().c;
            Ok(vec![channel_scatter_add(&dy, &shuffle_sources(c, *g), c)])
        }
        Op::ChannelGather(idx) => {
            arity(name, inputs.len(), &[1])?;
            let dy = one(cotangents)?;
            Ok(vec![channel_scatter_add(&dy, idx, inputs[0].shape().c)])
        }
        Op::Relu => {
            arity(name, inputs.len(), &[1])?;
            let dy = one(cotangents)?;
            Ok(vec![inputs[0].zip_map(&dy, name, |x, g| {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            })?])
        }
        Op::Add => {
            arity(name, inputs.len(), &[2])?;
            let dy = one(cotangents)?;
            Ok(vec![dy.clone(), dy])
        }
        Op::Shift(_) => {
            arity(name, inputs.len(), &[1])?;
            Ok(vec![one(cotangents)?])
        }
        Op::L1Loss => {
            arity(name, inputs.len(), &[2])?;
            let dy = one(cotangents)?;
            let (pred, target) = (inputs[0], inputs[1]);
            let k = dy.data()[0] / T::from_usize(pred.len()).expect("count");
            // subgradient at zero residual is zero
            let dp = pred.zip_map(target, name, |p, t| {
                if p > t {
                    k
                } else if p < t {
                    -k
                } else {
                    T::zero()
                }
            })?;
            let dt = dp.scale(-T::one());
            Ok(vec![dp, dt])
        }
        Op::BilinearResize(_) | Op::BicubicResize(_) => Err(Error::Unsupported(name)),
    }
}
