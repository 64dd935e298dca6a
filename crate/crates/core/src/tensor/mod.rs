//! Dense `(N, C, H, W)` tensors and the primitive operations the
//! super-resolution networks are built from.
//!
//! Every operation here is a pure function of its inputs. Kernels are
//! direct loops parallelised over output planes; each output element is
//! accumulated by exactly one task in a fixed order, so results do not
//! depend on the thread count.

mod conv;
pub mod grad;
mod layout;
mod resize;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_backward, mac_counter, ConvWeights};
pub use layout::{
    channel_gather, channel_shuffle, channel_split, concat_channels, pixel_shuffle, split_index,
};
pub use resize::{bicubic_resize, bilinear_resize, resize_region, Interpolation};

/// Real number type a tensor is stored in.
///
/// `f32` is the inference and training precision; `f64` is used for
/// gradient checking.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Extents of a 4-D tensor.
///
/// Batch, height and width are at least one. The channel axis may be zero,
/// which is what a channel split with ratio 1 leaves on its idle side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.n == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::invalid(
                "tensor",
                format!("batch, height and width must be positive, got {shape}"),
            ));
        }
        if data.len() != shape.len() {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "data",
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        assert!(
            shape.n > 0 && shape.h > 0 && shape.w > 0,
            "batch, height and width must be positive, got {shape}"
        );
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        let mut t = Self::zeros(shape);
        let mut i = 0;
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        t.data[i] = f([n, c, h, w]);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// One `(H, W)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds a per-channel constant, e.g. a mean shift.
    pub fn shift_channels(&self, offsets: &[T]) -> Result<Self> {
        if offsets.len() != self.shape.c {
            return Err(Error::Dimension {
                op: "shift_channels",
                axis: "C",
                expected: self.shape.c,
                actual: offsets.len(),
            });
        }
        let p = self.shape.plane();
        let mut out = self.clone();
        for (i, chunk) in out.data.chunks_mut(p).enumerate() {
            let off = offsets[i % self.shape.c];
            chunk.iter_mut().for_each(|v| *v += off);
        }
        Ok(out)
    }

    /// Crops the spatial window `[y, y+h) x [x, x+w)` from every plane.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y + h > self.shape.h || x + w > self.shape.w {
            return Err(Error::invalid(
                "crop",
                format!(
                    "window {h}x{w} at ({y}, {x}) outside {}x{}",
                    self.shape.h, self.shape.w
                ),
            ));
        }
        let s = self.shape;
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for plane in self.data.chunks(s.plane()) {
            for row in plane.chunks(s.w).skip(y).take(h) {
                data.extend_from_slice(&row[x..x + w]);
            }
        }
        Tensor::new(Shape::new(s.n, s.c, h, w), data)
    }

    /// Writes `src` into this tensor with its top-left corner at `(y, x)`.
    /// Rows and columns falling outside are dropped.
    pub fn paste(&mut self, src: &Self, y: usize, x: usize) -> Result<()> {
        let (d, s) = (self.shape, src.shape);
        if d.n != s.n || d.c != s.c {
            return Err(Error::invalid(
                "paste",
                format!("cannot paste {s} into {d}"),
            ));
        }
        let rows = s.h.min(d.h.saturating_sub(y));
        let cols = s.w.min(d.w.saturating_sub(x));
        for n in 0..s.n {
            for c in 0..s.c {
                for r in 0..rows {
                    let si = src.index(n, c, r, 0);
                    let di = self.index(n, c, y + r, x);
                    self.data[di..di + cols].copy_from_slice(&src.data[si..si + cols]);
                }
            }
        }
        Ok(())
    }

    /// Stacks tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(Error::invalid(
                    "stack",
                    format!("shape {} does not match {}", t.shape, first.shape),
                ));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(n, first.shape.c, first.shape.h, first.shape.w), data)
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape, other.shape);
        for (axis, x, y) in [("N", a.n, b.n), ("C", a.c, b.c), ("H", a.h, b.h), ("W", a.w, b.w)] {
            if x != y {
                return Err(Error::Dimension {
                    op,
                    axis,
                    expected: x,
                    actual: y,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor { shape, data }
    }
}
