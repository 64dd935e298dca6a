//! PNG reading and writing for `(1, 3, H, W)` tensors in `[0, 255]`.

use std::io::Cursor;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn image_error(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn to_tensor(img: DynamicImage, path: &Path) -> Result<Tensor<f32>> {
    match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::L8 | ColorType::La8 => {}
        other => return Err(image_error(path, format!("unsupported pixel format {other:?}, expected 8-bit"))),
    }
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32;
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data)
}

/// Decodes an 8-bit PNG into a `(1, 3, H, W)` tensor. Grey and alpha
/// images are converted to RGB.
pub fn decode_png(bytes: &[u8], label: &Path) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| image_error(label, e))?;
    to_tensor(img, label)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| image_error(path, e))?;
    decode_png(&bytes, path)
}

/// First image of the batch as 8-bit RGB, rounded and clamped.
pub fn to_rgb8<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::Dimension {
            op: "to_rgb8",
            axis: "C",
            expected: 3,
            actual: s.c,
        });
    }
    Ok(RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let v = |c| quantize(t.at(0, c, y as usize, x as usize).as_f64()) as u8;
        image::Rgb([v(0), v(1), v(2)])
    }))
}

/// Rounds to the nearest integer in `[0, 255]`.
pub fn quantize(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

pub fn encode_png<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(t)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| image_error(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

pub fn write_png<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}
