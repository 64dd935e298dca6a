//! Lightweight single-image super-resolution.
//!
//! The crate provides a small dense-tensor engine with hand-written
//! vector-Jacobian products, the standard residual block and four
//! lightweight variants (channel-split, shuffle, idle and ghost), a
//! hybrid residual-group network built from them, an analytical cost
//! model, toy-scale training, PSNR/SSIM evaluation and the tile scheduler
//! behind an interactive zoom viewer.

pub mod autograd;
pub mod blocks;
pub mod cost;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod trainer;
pub mod upscale;
pub mod weights;
pub mod zoom;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
