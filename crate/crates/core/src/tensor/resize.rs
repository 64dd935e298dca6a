//! Separable resampling with half-pixel centres and edge replication.
//!
//! Output pixel `X` samples source coordinate `(X + 0.5) / scale - 0.5`.
//! The mapping is always taken in whole-image coordinates, so a tile
//! resampled through [`resize_region`] produces exactly the whole-image
//! pixels wherever its taps stay inside the tile.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Interpolation {
    Bilinear,
    /// Catmull-Rom style cubic with `a = -0.5`; antialiased (kernel widened
    /// by `1 / scale`) when shrinking.
    Bicubic,
}

fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

type Taps = Vec<(usize, f64)>;

fn axis_taps(
    interp: Interpolation,
    scale: f64,
    in_len: usize,
    src_origin: usize,
    out_origin: usize,
    out_len: usize,
) -> Vec<Taps> {
    let last = in_len as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    (out_origin..out_origin + out_len)
        .map(|x| {
            let centre = (x as f64 + 0.5) / scale - 0.5 - src_origin as f64;
            match interp {
                Interpolation::Bilinear => {
                    let i0 = centre.floor();
                    let f = centre - i0;
                    let i0 = i0 as isize;
                    vec![(clamp(i0), 1.0 - f), (clamp(i0 + 1), f)]
                }
                Interpolation::Bicubic => {
                    let k = scale.min(1.0);
                    let support = 2.0 / k;
                    let lo = (centre - support).floor() as isize + 1;
                    let hi = (centre + support).floor() as isize;
                    let mut taps: Taps = (lo..=hi)
                        .map(|j| (clamp(j), cubic((centre - j as f64) * k)))
                        .filter(|&(_, w)| w != 0.0)
                        .collect();
                    let total: f64 = taps.iter().map(|t| t.1).sum();
                    taps.iter_mut().for_each(|t| t.1 /= total);
                    taps
                }
            }
        })
        .collect()
}

/// Resamples a window of the scaled image.
///
/// `x` holds the source pixels whose top-left corner sits at `src_origin`
/// `(y, x)` in whole-image coordinates; the result holds output pixels
/// `[out_origin, out_origin + out_size)` of the image scaled by `scale`.
/// Taps falling outside `x` are clamped to its edge.
pub fn resize_region<T: Scalar>(
    x: &Tensor<T>,
    interp: Interpolation,
    scale: f64,
    src_origin: (usize, usize),
    out_origin: (usize, usize),
    out_size: (usize, usize),
) -> Result<Tensor<T>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("resize", format!("scale must be positive, got {scale}")));
    }
    if out_size.0 == 0 || out_size.1 == 0 {
        return Err(Error::invalid("resize", "empty output window"));
    }
    let s = x.shape();
    let rows = axis_taps(interp, scale, s.h, src_origin.0, out_origin.0, out_size.0);
    let cols = axis_taps(interp, scale, s.w, src_origin.1, out_origin.1, out_size.1);
    let (oh, ow) = out_size;

    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    let mut horiz = vec![T::zero(); s.h * ow];
    for plane in x.data().chunks(s.plane().max(1)).take(s.n * s.c) {
        for (r, row) in plane.chunks(s.w).enumerate() {
            for (ox, taps) in cols.iter().enumerate() {
                horiz[r * ow + ox] = taps
                    .iter()
                    .map(|&(i, w)| row[i] * T::lit(w))
                    .fold(T::zero(), |a, b| a + b);
            }
        }
        for taps in &rows {
            for ox in 0..ow {
                out.push(
                    taps.iter()
                        .map(|&(i, w)| horiz[i * ow + ox] * T::lit(w))
                        .fold(T::zero(), |a, b| a + b),
                );
            }
        }
    }
    Tensor::new(Shape::new(s.n, s.c, oh, ow), out)
}

/// Output extent `round(len * scale)`, at least one.
pub(crate) fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

fn resize<T: Scalar>(x: &Tensor<T>, interp: Interpolation, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("resize", format!("scale must be positive, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(x.clone());
    }
    let s = x.shape();
    resize_region(
        x,
        interp,
        scale,
        (0, 0),
        (0, 0),
        (scaled_len(s.h, scale), scaled_len(s.w, scale)),
    )
}

/// Bilinear resize to `round(H * scale) x round(W * scale)`.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    resize(x, Interpolation::Bilinear, scale)
}

/// Bicubic resize to `round(H * scale) x round(W * scale)`.
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    resize(x, Interpolation::Bicubic, scale)
}
