//! Pure data-movement operations along the channel axis.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Number of channels `round(alpha * c)` (half rounds up) on the active
/// side of a channel split.
pub fn split_index(alpha: f64, c: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(
            "channel_split",
            format!("alpha must lie in (0, 1], got {alpha}"),
        ));
    }
    let k = (alpha * c as f64 + 0.5).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(
            "channel_split",
            format!("alpha = {alpha} leaves no active channels out of {c}"),
        ));
    }
    Ok(k.min(c))
}

/// Copies channels `[start, start + len)`.
pub(crate) fn channel_slice<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    debug_assert!(start + len <= s.c);
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let base = (n * s.c + start) * p;
        data.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::from_parts(Shape::new(s.n, len, s.h, s.w), data)
}

/// Splits into the first `round(alpha * C)` channels and the rest.
pub fn channel_split<T: Scalar>(x: &Tensor<T>, alpha: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.shape().c;
    let k = split_index(alpha, c)?;
    Ok((channel_slice(x, 0, k), channel_slice(x, k, c - k)))
}

/// Channels of `a` followed by channels of `b`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    for (axis, x, y) in [("N", sa.n, sb.n), ("H", sa.h, sb.h), ("W", sa.w, sb.w)] {
        if x != y {
            return Err(Error::Dimension {
                op: "concat_channels",
                axis,
                expected: x,
                actual: y,
            });
        }
    }
    let p = sa.plane();
    let c = sa.c + sb.c;
    let mut data = Vec::with_capacity(sa.n * c * p);
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.c * p..(n + 1) * sa.c * p]);
        data.extend_from_slice(&b.data()[n * sb.c * p..(n + 1) * sb.c * p]);
    }
    Ok(Tensor::from_parts(Shape::new(sa.n, c, sa.h, sa.w), data))
}

/// Output channel `j` is input channel `indices[j]`.
pub fn channel_gather<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    if let Some(&bad) = indices.iter().find(|&&i| i >= s.c) {
        return Err(Error::invalid(
            "channel_gather",
            format!("channel {bad} out of range for {} channels", s.c),
        ));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * indices.len() * p);
    for n in 0..s.n {
        for &i in indices {
            let base = (n * s.c + i) * p;
            data.extend_from_slice(&x.data()[base..base + p]);
        }
    }
    Ok(Tensor::from_parts(
        Shape::new(s.n, indices.len(), s.h, s.w),
        data,
    ))
}

/// Scatter-add adjoint of [`channel_gather`].
pub(crate) fn channel_scatter_add<T: Scalar>(
    dy: &Tensor<T>,
    indices: &[usize],
    channels: usize,
) -> Tensor<T> {
    let s = dy.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, channels, s.h, s.w));
    for n in 0..s.n {
        for (j, &i) in indices.iter().enumerate() {
            let src = &dy.data()[(n * s.c + j) * p..][..p];
            let dst = &mut out.data_mut()[(n * channels + i) * p..][..p];
            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
        }
    }
    out
}

/// Source channel for each output channel of a shuffle with `g` groups.
///
/// Input channel `c` moves to `(c mod g) * (C / g) + c / g`.
pub(crate) fn shuffle_sources(c: usize, g: usize) -> Vec<usize> {
    let per = c / g;
    let mut src = vec![0; c];
    for i in 0..c {
        src[(i % g) * per + i / g] = i;
    }
    src
}

pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let c = x.shape().c;
    if g == 0 || c % g != 0 {
        return Err(Error::invalid(
            "channel_shuffle",
            format!("{c} channels not divisible into {g} groups"),
        ));
    }
    channel_gather(x, &shuffle_sources(c, g))
}

/// Depth-to-space: `(N, C*r*r, H, W) -> (N, C, H*r, W*r)`.
///
/// Output `(n, c, h*r + a, w*r + b)` is input `(n, c*r*r + a*r + b, h, w)`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("{} channels not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let oc = s.c / (r * r);
    let (oh, ow) = (s.h * r, s.w * r);
    let mut out = vec![T::zero(); s.len()];
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..oc {
            for a in 0..r {
                for b in 0..r {
                    let ic = c * r * r + a * r + b;
                    let src = &xd[(n * s.c + ic) * s.plane()..][..s.plane()];
                    let dst_plane = (n * oc + c) * oh * ow;
                    for h in 0..s.h {
                        let row = dst_plane + (h * r + a) * ow + b;
                        for w in 0..s.w {
                            out[row + w * r] = src[h * s.w + w];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, oc, oh, ow), out))
}

/// Space-to-depth inverse of [`pixel_shuffle`]; also its adjoint.
pub(crate) fn pixel_unshuffle<T: Scalar>(y: &Tensor<T>, r: usize) -> Tensor<T> {
    let s = y.shape();
    let (h, w) = (s.h / r, s.w / r);
    let ic_total = s.c * r * r;
    let mut out = vec![T::zero(); s.len()];
    let yd = y.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for a in 0..r {
                for b in 0..r {
                    let ic = c * r * r + a * r + b;
                    let dst = (n * ic_total + ic) * h * w;
                    let src_plane = (n * s.c + c) * s.h * s.w;
                    for hh in 0..h {
                        let row = src_plane + (hh * r + a) * s.w + b;
                        for ww in 0..w {
                            out[dst + hh * w + ww] = yd[row + ww * r];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(Shape::new(s.n, ic_total, h, w), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_ids(c: usize) -> Tensor<f32> {
        Tensor::from_fn([1, c, 1, 1], |[_, c, _, _]| c as f32)
    }

    #[test]
    fn split_sizes_follow_alpha() {
        let x = Tensor::<f32>::zeros([1, 16, 2, 2]);
        let (a, b) = channel_split(&x, 0.25).unwrap();
        assert_eq!((a.shape().c, b.shape().c), (4, 12));
        let (a, b) = channel_split(&x, 0.125).unwrap();
        assert_eq!((a.shape().c, b.shape().c), (2, 14));
        let (a, b) = channel_split(&x, 1.0).unwrap();
        assert_eq!((a.shape().c, b.shape().c), (16, 0));
    }

    #[test]
    fn split_rejects_alpha_outside_unit_interval() {
        let x = Tensor::<f32>::zeros([1, 16, 2, 2]);
        assert!(channel_split(&x, 0.0).is_err());
        assert!(channel_split(&x, 1.5).is_err());
        assert!(channel_split(&x, 0.01).is_err());
    }

    #[test]
    fn split_rounds_half_up() {
        assert_eq!(split_index(0.5, 3).unwrap(), 2);
        assert_eq!(split_index(0.1, 5).unwrap(), 1);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let x = channel_ids(4);
        let (a, b) = channel_split(&x, 1.0).unwrap();
        assert_eq!(concat_channels(&a, &b).unwrap(), x);
        let four = channel_ids(4);
        let twelve = channel_ids(12);
        assert_eq!(concat_channels(&four, &twelve).unwrap().shape().c, 16);
    }

    #[test]
    fn concat_spatial_mismatch() {
        let a = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let b = Tensor::<f32>::zeros([1, 2, 3, 4]);
        assert!(matches!(
            concat_channels(&a, &b),
            Err(Error::Dimension { axis: "W", .. })
        ));
    }

    #[test]
    fn shuffle_examples() {
        let x = channel_ids(4);
        let y = channel_shuffle(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 1.0, 3.0]);
        assert_eq!(channel_shuffle(&y, 2).unwrap(), x);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
        assert!(channel_shuffle(&x, 3).is_err());
    }

    #[test]
    fn pixel_shuffle_examples() {
        let x = Tensor::<f32>::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::<f32>::zeros([1, 4, 2, 2]);
        assert_eq!(pixel_shuffle(&z, 2).unwrap().shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&Tensor::<f32>::zeros([1, 6, 1, 1]), 2).is_err());
    }

    #[test]
    fn unshuffle_inverts_shuffle() {
        let x = Tensor::<f32>::from_fn([2, 8, 3, 2], |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f32);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(pixel_unshuffle(&y, 2), x);
    }
}
