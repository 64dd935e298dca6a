use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Kernel, optional bias and geometry of one 2-D convolution.
///
/// `groups == 1` is a standard convolution, `groups == C_in == C_out` a
/// depthwise one, and a 1x1 kernel with one group a pointwise one.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T = f32> {
    /// Unique within a network; keys gradients, optimizer state and the
    /// weight file.
    pub name: String,
    /// `(C_out, C_in / groups, k_h, k_w)`.
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(
        name: impl Into<String>,
        kernel: Tensor<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let k = kernel.shape();
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        if k.n % groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("C_out = {} not divisible by groups = {groups}", k.n),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != k.n {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: "bias",
                    expected: k.n,
                    actual: b.len(),
                });
            }
        }
        Ok(ConvWeights {
            name: name.into(),
            kernel,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// A stride-1 convolution with "same" zero padding for odd `k`.
    pub fn zeros(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, groups: usize) -> Self {
        assert!(groups > 0 && c_in % groups == 0 && c_out % groups == 0);
        ConvWeights {
            name: name.into(),
            kernel: Tensor::zeros([c_out, c_in / groups, k, k]),
            bias: Some(vec![T::zero(); c_out]),
            stride: 1,
            padding: k / 2,
            groups,
        }
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape().c * self.groups
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let k = self.kernel.shape();
        (k.h, k.w)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel_size();
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    /// Multiply-accumulates for one image of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w);
        let (kh, kw) = self.kernel_size();
        (self.c_out() * self.c_in() / self.groups * kh * kw * oh * ow) as u64
    }

    pub fn cast<U: Scalar>(&self) -> ConvWeights<U> {
        ConvWeights {
            name: self.name.clone(),
            kernel: self.kernel.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&v| U::lit(v.as_f64())).collect()),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

/// Per-thread count of convolution multiply-accumulates actually issued.
///
/// Serves as a measured counterpart to the analytical cost model.
pub mod mac_counter {
    use std::cell::Cell;

    thread_local! {
        static MACS: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        MACS.with(|m| m.set(0));
    }

    pub fn read() -> u64 {
        MACS.with(Cell::get)
    }

    pub(crate) fn add(n: u64) {
        MACS.with(|m| m.set(m.get() + n));
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub(crate) fn check_conv<T: Scalar>(
    x: Shape,
    kernel: Shape,
    bias: Option<&[T]>,
    g: Geometry,
) -> Result<Shape> {
    if g.stride == 0 || g.groups == 0 {
        return Err(Error::invalid("conv2d", "stride and groups must be positive"));
    }
    let c_in = kernel.c * g.groups;
    if x.c != c_in {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "C",
            expected: c_in,
            actual: x.c,
        });
    }
    if kernel.n % g.groups != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("C_out = {} not divisible by groups = {}", kernel.n, g.groups),
        ));
    }
    if let Some(b) = bias {
        if b.len() != kernel.n {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "bias",
                expected: kernel.n,
                actual: b.len(),
            });
        }
    }
    if x.h + 2 * g.padding < kernel.h {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "H",
            expected: kernel.h,
            actual: x.h + 2 * g.padding,
        });
    }
    if x.w + 2 * g.padding < kernel.w {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "W",
            expected: kernel.w,
            actual: x.w + 2 * g.padding,
        });
    }
    let oh = (x.h + 2 * g.padding - kernel.h) / g.stride + 1;
    let ow = (x.w + 2 * g.padding - kernel.w) / g.stride + 1;
    Ok(Shape::new(x.n, kernel.n, oh, ow))
}

/// Output columns `ox` for which `ox * stride + kx - pad` lands in `[0, w)`.
#[inline]
fn valid_cols(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    // largest ox with ox*stride + kx - pad <= w - 1
    let hi = if w + pad < kx + 1 {
        0
    } else {
        ((w + pad - kx - 1) / stride + 1).min(ow)
    };
    (lo.min(hi), hi)
}

/// `y = conv(x, w) + b` with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    conv2d_raw(
        x,
        &w.kernel,
        w.bias.as_deref(),
        Geometry {
            stride: w.stride,
            padding: w.padding,
            groups: w.groups,
        },
    )
}

pub(crate) fn conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    g: Geometry,
) -> Result<Tensor<T>> {
    let out_shape = check_conv(x.shape(), kernel.shape(), bias, g)?;
    let xs = x.shape();
    let ks = kernel.shape();
    let cin_g = ks.c;
    let cout_g = ks.n / g.groups;
    let (oh, ow) = (out_shape.h, out_shape.w);
    mac_counter::add((out_shape.len() * cin_g * ks.h * ks.w) as u64);

    let mut out = vec![T::zero(); out_shape.len()];
    if out.is_empty() {
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let xd = x.data();
    let kd = kernel.data();
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, plane)| {
            let n = plane_idx / ks.n;
            let oc = plane_idx % ks.n;
            let b = bias.map_or(T::zero(), |b| b[oc]);
            plane.iter_mut().for_each(|v| *v = b);
            let group = oc / cout_g;
            for icl in 0..cin_g {
                let ic = group * cin_g + icl;
                let in_plane = &xd[(n * xs.c + ic) * xs.h * xs.w..][..xs.h * xs.w];
                let kbase = (oc * cin_g + icl) * ks.h * ks.w;
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let wv = kd[kbase + ky * ks.w + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (lo, hi) = valid_cols(ow, xs.w, g.stride, kx, g.padding);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy * g.stride + ky;
                            if iy < g.padding || iy - g.padding >= xs.h {
                                continue;
                            }
                            let in_row = &in_plane[(iy - g.padding) * xs.w..][..xs.w];
                            let out_row = &mut plane[oy * ow..][..ow];
                            if g.stride == 1 {
                                let ix0 = lo + kx - g.padding;
                                let src = &in_row[ix0..ix0 + (hi - lo)];
                                for (o, &i) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in lo..hi {
                                    out_row[ox] += wv * in_row[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Gradients of a convolution with respect to its input, kernel and bias.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Vector-Jacobian product of [`conv2d`] given the output cotangent `dy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &ConvWeights<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_raw(
        x,
        &w.kernel,
        Geometry {
            stride: w.stride,
            padding: w.padding,
            groups: w.groups,
        },
        dy,
    )
}

pub(crate) fn conv2d_backward_raw<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    g: Geometry,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let out_shape = check_conv::<T>(x.shape(), kernel.shape(), None, g)?;
    if dy.shape() != out_shape {
        return Err(Error::invalid(
            "conv2d_backward",
            format!("cotangent shape {} != output shape {out_shape}", dy.shape()),
        ));
    }
    let xs = x.shape();
    let ks = kernel.shape();
    let cin_g = ks.c;
    let cout_g = ks.n / g.groups;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let xd = x.data();
    let kd = kernel.data();
    let dyd = dy.data();

    // input gradient: one task per input plane
    let mut dx = vec![T::zero(); xs.len()];
    if !dx.is_empty() {
        dx.par_chunks_mut(xs.h * xs.w)
            .enumerate()
            .for_each(|(plane_idx, plane)| {
                let n = plane_idx / xs.c;
                let ic = plane_idx % xs.c;
                let group = ic / cin_g;
                let icl = ic % cin_g;
                for oc in group * cout_g..(group + 1) * cout_g {
                    let dy_plane = &dyd[(n * ks.n + oc) * oh * ow..][..oh * ow];
                    let kbase = (oc * cin_g + icl) * ks.h * ks.w;
                    for ky in 0..ks.h {
                        for kx in 0..ks.w {
                            let wv = kd[kbase + ky * ks.w + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            let (lo, hi) = valid_cols(ow, xs.w, g.stride, kx, g.padding);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy * g.stride + ky;
                                if iy < g.padding || iy - g.padding >= xs.h {
                                    continue;
                                }
                                let dst = &mut plane[(iy - g.padding) * xs.w..][..xs.w];
                                let src = &dy_plane[oy * ow..][..ow];
                                for ox in lo..hi {
                                    dst[ox * g.stride + kx - g.padding] += wv * src[ox];
                                }
                            }
                        }
                    }
                }
            });
    }

    // kernel and bias gradients: one task per output channel
    let per_oc: Vec<(Vec<T>, T)> = (0..ks.n)
        .into_par_iter()
        .map(|oc| {
            let group = oc / cout_g;
            let mut dk = vec![T::zero(); cin_g * ks.h * ks.w];
            let mut db = T::zero();
            for n in 0..xs.n {
                let dy_plane = &dyd[(n * ks.n + oc) * oh * ow..][..oh * ow];
                db += dy_plane.iter().copied().sum::<T>();
                for icl in 0..cin_g {
                    let ic = group * cin_g + icl;
                    let in_plane = &xd[(n * xs.c + ic) * xs.h * xs.w..][..xs.h * xs.w];
                    for ky in 0..ks.h {
                        for kx in 0..ks.w {
                            let (lo, hi) = valid_cols(ow, xs.w, g.stride, kx, g.padding);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let iy = oy * g.stride + ky;
                                if iy < g.padding || iy - g.padding >= xs.h {
                                    continue;
                                }
                                let in_row = &in_plane[(iy - g.padding) * xs.w..][..xs.w];
                                let dy_row = &dy_plane[oy * ow..][..ow];
                                for ox in lo..hi {
                                    acc += dy_row[ox] * in_row[ox * g.stride + kx - g.padding];
                                }
                            }
                            dk[(icl * ks.h + ky) * ks.w + kx] += acc;
                        }
                    }
                }
            }
            (dk, db)
        })
        .collect();

    let mut dkernel = Vec::with_capacity(kernel.len());
    let mut dbias = Vec::with_capacity(ks.n);
    for (dk, db) in per_oc {
        dkernel.extend(dk);
        dbias.push(db);
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(xs, dx),
        kernel: Tensor::from_parts(ks, dkernel),
        bias: dbias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_depthwise(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let s = x.shape();
        let kk = k.shape();
        let oh = s.h + 2 * pad - kk.h + 1;
        let ow = s.w + 2 * pad - kk.w + 1;
        Tensor::from_fn([s.n, s.c, oh, ow], |[n, c, y, xx]| {
            let mut acc = 0.0;
            for ky in 0..kk.h {
                for kx in 0..kk.w {
                    let iy = (y + ky) as isize - pad as isize;
                    let ix = (xx + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        acc += k.at(c, 0, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let w = ConvWeights::new("id", Tensor::full([1, 1, 1, 1], 1.0), None, 1, 0, 1).unwrap();
        assert_eq!(conv2d(&x, &w).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_center_sums_neighbourhood() {
        let x = Tensor::<f32>::new([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = ConvWeights::new("ones", Tensor::full([1, 1, 3, 3], 1.0), None, 1, 1, 1).unwrap();
        let y = conv2d(&x, &w).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        // corner only sees its 2x2 neighbourhood under zero padding
        assert_eq!(y.at(0, 0, 0, 0), 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn same_padding_keeps_feature_geometry() {
        let x = Tensor::<f32>::zeros([1, 16, 96, 96]);
        let w = ConvWeights::<f32>::zeros("c", 16, 16, 3, 1);
        assert_eq!(conv2d(&x, &w).unwrap().shape(), Shape::new(1, 16, 96, 96));
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros([1, 4, 5, 5]);
        let w = ConvWeights::<f32>::zeros("c", 3, 8, 3, 1);
        match conv2d(&x, &w).unwrap_err() {
            Error::Dimension { axis, expected, actual, .. } => {
                assert_eq!((axis, expected, actual), ("C", 3, 4));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let w = ConvWeights::<f32>::new("c", Tensor::zeros([1, 1, 5, 5]), None, 1, 0, 1).unwrap();
        assert!(matches!(conv2d(&x, &w), Err(Error::Dimension { axis: "H", .. })));
    }

    #[test]
    fn depthwise_matches_per_channel_loop_bit_for_bit() {
        let x = Tensor::<f64>::from_fn([2, 3, 5, 6], |[n, c, h, w]| {
            ((n * 7 + c * 13 + h * 3 + w) as f64 * 0.37).sin()
        });
        let k = Tensor::<f64>::from_fn([3, 1, 3, 3], |[c, _, h, w]| ((c * 9 + h * 3 + w) as f64 * 0.11).cos());
        let w = ConvWeights::new("dw", k.clone(), None, 1, 1, 3).unwrap();
        let got = conv2d(&x, &w).unwrap();
        let want = naive_depthwise(&x, &k, 1);
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn strided_output_shape() {
        let x = Tensor::<f32>::zeros([1, 2, 7, 8]);
        let mut w = ConvWeights::<f32>::zeros("s", 2, 4, 3, 1);
        w.stride = 2;
        assert_eq!(conv2d(&x, &w).unwrap().shape(), Shape::new(1, 4, 4, 4));
    }

    #[test]
    fn mac_counter_tracks_issued_work() {
        mac_counter::reset();
        let x = Tensor::<f32>::zeros([1, 16, 96, 96]);
        let w = ConvWeights::<f32>::zeros("c", 16, 16, 3, 1);
        conv2d(&x, &w).unwrap();
        assert_eq!(mac_counter::read(), 21_233_664);
        assert_eq!(w.macs(96, 96), 21_233_664);
        assert_eq!(w.param_count(), 2_320);
    }
}
