//! Luminance PSNR and SSIM, dataset loading and evaluation reports.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image_io::{quantize, read_png};
use crate::tensor::{bicubic_resize, bilinear_resize, Scalar, Shape, Tensor};
use crate::upscale::Upscaler;

/// A high-resolution image and its low-resolution counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// `(1, 3, H, W)` with `H` and `W` multiples of the scale.
    pub hr: Tensor<f32>,
    /// `(1, 3, H / scale, W / scale)`.
    pub lr: Tensor<f32>,
}

/// How low-resolution images are produced from high-resolution ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Degradation {
    #[default]
    Bicubic,
    Bilinear,
}

impl Degradation {
    pub fn apply(self, hr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
        let f = 1.0 / scale as f64;
        match self {
            Degradation::Bicubic => bicubic_resize(hr, f),
            Degradation::Bilinear => bilinear_resize(hr, f),
        }
    }
}

/// Drops right and bottom rows so both sides are multiples of `scale`.
pub fn crop_to_multiple(t: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (h, w) = (s.h / scale * scale, s.w / scale * scale);
    if h == 0 || w == 0 {
        return Err(Error::Dataset(format!("image {}x{} is smaller than the scale {scale}", s.h, s.w)));
    }
    t.crop(0, 0, h, w)
}

impl ImagePair {
    /// Crops `hr` to a multiple of `scale` and degrades it.
    pub fn from_hr(id: impl Into<String>, hr: &Tensor<f32>, scale: usize, degradation: Degradation) -> Result<Self> {
        let hr = crop_to_multiple(hr, scale)?;
        let lr = degradation.apply(&hr, scale)?;
        Ok(ImagePair { id: id.into(), hr, lr })
    }
}

/// A named list of pairs plus the files that could not be used.
#[derive(Debug)]
pub struct Dataset {
    pub id: String,
    pub pairs: Vec<ImagePair>,
    pub skipped: Vec<(PathBuf, Error)>,
}

/// Reads every `*.png` in `dir` in filename order as a high-resolution
/// image. A file of the same name in the subdirectory `x{scale}` is used as
/// its low-resolution counterpart; otherwise one is generated by
/// `degradation`.
pub fn load_dataset(dir: impl AsRef<Path>, scale: usize, degradation: Degradation) -> Result<Dataset> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();

    let paired_dir = dir.join(format!("x{scale}"));
    let load = |path: &PathBuf| -> Result<ImagePair> {
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let hr = read_png(path)?;
        let paired = paired_dir.join(path.file_name().expect("listed file"));
        if !paired.is_file() {
            return ImagePair::from_hr(id, &hr, scale, degradation);
        }
        let lr = read_png(&paired)?;
        let s = lr.shape();
        let hr = hr.crop(0, 0, s.h * scale, s.w * scale).map_err(|_| Error::Image {
            path: paired.display().to_string(),
            reason: format!("{}x{} is not the high-resolution size divided by {scale}", s.h, s.w),
        })?;
        Ok(ImagePair { id, hr, lr })
    };

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        match load(&path) {
            Ok(p) => pairs.push(p),
            Err(e) => skipped.push((path, e)),
        }
    }
    Ok(Dataset {
        id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        pairs,
        skipped,
    })
}

/// Studio-swing BT.601 luma of RGB values in `[0, 255]`:
/// `Y = 16 + (65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<f64>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::Dimension {
            op: "rgb_to_y",
            axis: "C",
            expected: 3,
            actual: s.c,
        });
    }
    Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |[n, _, y, x]| {
        let (r, g, b) = (img.at(n, 0, y, x).as_f64(), img.at(n, 1, y, x).as_f64(), img.at(n, 2, y, x).as_f64());
        16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    }))
}

/// `10 log10(255^2 / MSE)`; infinite for identical inputs.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable valid-region filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(i, c)| c * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, c)| c * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid positions of an 11x11 Gaussian window
/// (sigma 1.5), with `K1 = 0.01`, `K2 = 0.03` and `L = 255`. Single-channel
/// inputs, averaged over the batch.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let s = a.shape();
    if s.c != 1 {
        return Err(Error::Dimension {
            op: "ssim",
            axis: "C",
            expected: 1,
            actual: s.c,
        });
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s.h, s.w),
        ));
    }
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        let (x, y) = (a.plane(n, 0), b.plane(n, 0));
        let f = |v: &[f64]| filter_valid(v, s.h, s.w, &g);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mx, my) = (f(x), f(y));
        let (xx, yy, xy) = (f(&prod(x, x)), f(&prod(y, y)), f(&prod(x, y)));
        for i in 0..mx.len() {
            let (vx, vy, cov) = (xx[i] - mx[i] * mx[i], yy[i] - my[i] * my[i], xy[i] - mx[i] * my[i]);
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Renders a PSNR value, with `inf` for identical images.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub scale: usize,
    pub shave: usize,
    pub images: Vec<ImageScore>,
    #[serde(serialize_with = "serialize_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.images.iter().map(|i| i.id.len()).max().unwrap_or(0).max(5);
        let mut s = format!(
            "{} x{} {} (shave {})\n{:<width$} {:>10} {:>8}\n",
            self.dataset, self.scale, self.method, self.shave, "image", "psnr", "ssim"
        );
        for i in &self.images {
            s += &format!("{:<width$} {:>10} {:>8.4}\n", i.id, format_db(i.psnr), i.ssim);
        }
        s += &format!("{:<width$} {:>10} {:>8.4}\n", "mean", format_db(self.mean_psnr), self.mean_ssim);
        s
    }
}

/// Scores one upscaled image against its reference: both are rounded to
/// 8 bits, converted to luma and shaved by `shave` pixels per border.
pub fn score(sr: &Tensor<f32>, hr: &Tensor<f32>, shave: usize) -> Result<(f64, f64)> {
    sr.expect_same_shape(hr, "score")?;
    let s = hr.shape();
    if 2 * shave >= s.h || 2 * shave >= s.w {
        return Err(Error::invalid("score", format!("shave {shave} leaves nothing of {}x{}", s.h, s.w)));
    }
    let prep = |t: &Tensor<f32>| -> Result<Tensor<f64>> {
        rgb_to_y(&t.cast::<f64>().map(quantize))?.crop(shave, shave, s.h - 2 * shave, s.w - 2 * shave)
    };
    let (a, b) = (prep(sr)?, prep(hr)?);
    Ok((psnr(&a, &b)?, ssim(&a, &b)?))
}

pub fn evaluate(
    method: &dyn Upscaler,
    dataset_id: &str,
    pairs: &[ImagePair],
    scale: usize,
    shave: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("dataset `{dataset_id}` has no images")));
    }
    let mut images = pairs
        .par_iter()
        .map(|p| {
            let sr = method.upscale_pair(p, scale)?;
            let (psnr, ssim) = score(&sr, &p.hr, shave)?;
            Ok(ImageScore { id: p.id.clone(), psnr, ssim })
        })
        .collect::<Result<Vec<_>>>()?;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let n = images.len() as f64;
    Ok(EvalReport {
        dataset: dataset_id.to_string(),
        method: method.name().to_string(),
        scale,
        shave,
        mean_psnr: images.iter().map(|i| i.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|i| i.ssim).sum::<f64>() / n,
        images,
    })
}
