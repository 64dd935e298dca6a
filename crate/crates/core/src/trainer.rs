//! L1 training with Adam, random crops, flips and quarter-turn rotations,
//! and a step-halving learning-rate schedule.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::eval::{Degradation, ImagePair};
use crate::layers::{Binder, ConvGrad};
use crate::network::{Network, NetworkConfig};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Side of the square high-resolution crop.
    pub hr_patch: usize,
    pub steps: usize,
    /// Steps between halvings of the learning rate; `None` means a third
    /// of `steps`.
    pub decay_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            batch_size: 16,
            hr_patch: 96,
            steps: 2000,
            decay_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scale: usize) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("beta1 and beta2 must be below 1".into()));
        }
        if self.batch_size == 0 || self.hr_patch == 0 || self.decay_every == Some(0) {
            return Err(Error::Config("batch_size, hr_patch and decay_every must be positive".into()));
        }
        if self.hr_patch % scale != 0 {
            return Err(Error::Config(format!(
                "hr_patch {} is not divisible by scale {scale}",
                self.hr_patch
            )));
        }
        Ok(())
    }

    pub fn decay_interval(&self) -> usize {
        self.decay_every.unwrap_or(self.steps / 3).max(1)
    }

    /// Learning rate in effect at `step` (zero-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((step / self.decay_interval()) as i32)
    }
}

/// First and second moments of every parameter tensor, keyed by
/// `<conv>.weight` and `<conv>.bias`.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

fn adam_update<T: Scalar>(
    params: &mut [T],
    grad: Option<&[T]>,
    (m, v): &mut (Vec<T>, Vec<T>),
    lr: f64,
    cfg: &TrainConfig,
    t: i32,
) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.epsilon));
    for i in 0..params.len() {
        let g = grad.map_or(T::zero(), |g| g[i]);
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
}

/// One bias-corrected Adam step at learning rate `lr`. Weights without a
/// gradient entry are treated as having zero gradient.
pub fn adam_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &HashMap<String, ConvGrad<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    for w in net.weights_mut() {
        let g = grads.get(&w.name);
        let zeros = |n: usize| (vec![T::zero(); n], vec![T::zero(); n]);
        let key = format!("{}.weight", w.name);
        let n = w.kernel.len();
        let mom = state.moments.entry(key).or_insert_with(|| zeros(n));
        adam_update(w.kernel.data_mut(), g.map(|g| g.kernel.data()), mom, lr, cfg, t);
        if let Some(b) = w.bias.as_mut() {
            let mom = state
                .moments
                .entry(format!("{}.bias", w.name))
                .or_insert_with(|| zeros(b.len()));
            adam_update(b, g.and_then(|g| g.bias.as_deref()), mom, lr, cfg, t);
        }
    }
}

/// Mean absolute error of the network on a batch and its gradient with
/// respect to every weight.
pub fn loss_and_grads<T: Scalar>(
    net: &Network<T>,
    lr: &Tensor<T>,
    hr: &Tensor<T>,
) -> Result<(f64, HashMap<String, ConvGrad<T>>)> {
    let mut binder = Binder::training();
    let y = net.forward_var(&Var::constant(lr.clone()), &mut binder)?;
    let loss = y.l1_loss(&Var::constant(hr.clone()))?;
    let value = loss.value().data()[0].as_f64();
    let grads = loss.backward()?;
    Ok((value, binder.collect(&grads)))
}

/// A horizontal flip followed by counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Augment {
    pub fn apply<T: Scalar>(self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.clone();
        if self.flip {
            let s = out.shape();
            out = Tensor::from_fn(s, |[n, c, y, x]| t.at(n, c, y, s.w - 1 - x));
        }
        for _ in 0..self.quarter_turns % 4 {
            let s = out.shape();
            let src = out;
            out = Tensor::from_fn(Shape::new(s.n, s.c, s.w, s.h), |[n, c, y, x]| {
                src.at(n, c, x, s.w - 1 - y)
            });
        }
        out
    }
}

/// One training sample: a crop position in low-resolution coordinates and
/// the augmentation applied to both sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub image: usize,
    pub y: usize,
    pub x: usize,
    pub augment: Augment,
}

/// Draws `batch_size` crops. All random decisions come from `rng` in a
/// fixed order.
pub fn draw_crops(pairs: &[ImagePair], scale: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<Crop>> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    let p = cfg.hr_patch / scale;
    (0..cfg.batch_size)
        .map(|_| {
            let image = rng.random_range(0..pairs.len());
            let s = pairs[image].lr.shape();
            if s.h < p || s.w < p {
                return Err(Error::Dataset(format!(
                    "image `{}` ({}x{} low resolution) is smaller than the {p}x{p} patch",
                    pairs[image].id, s.h, s.w
                )));
            }
            Ok(Crop {
                image,
                y: rng.random_range(0..=s.h - p),
                x: rng.random_range(0..=s.w - p),
                augment: Augment {
                    flip: rng.random_bool(0.5),
                    quarter_turns: rng.random_range(0..4),
                },
            })
        })
        .collect()
}

/// Cuts the low- and high-resolution patches of one crop.
pub fn extract(pairs: &[ImagePair], scale: usize, hr_patch: usize, crop: Crop) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let pair = &pairs[crop.image];
    let p = hr_patch / scale;
    let lr = pair.lr.crop(crop.y, crop.x, p, p)?;
    let hr = pair.hr.crop(crop.y * scale, crop.x * scale, hr_patch, hr_patch)?;
    Ok((crop.augment.apply(&lr), crop.augment.apply(&hr)))
}

/// A batch of `(lr, hr)` patches: `(B, 3, hr_patch / scale, ...)` and
/// `(B, 3, hr_patch, hr_patch)`.
pub fn sample_batch(
    pairs: &[ImagePair],
    scale: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let crops = draw_crops(pairs, scale, cfg, rng)?;
    let (lr, hr): (Vec<_>, Vec<_>) = crops
        .into_iter()
        .map(|c| extract(pairs, scale, cfg.hr_patch, c))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok((Tensor::stack(&lr)?, Tensor::stack(&hr)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(records: &[LossRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,lr,loss")?;
    for r in records {
        writeln!(out, "{},{},{}", r.step, r.lr, r.loss)?;
    }
    Ok(())
}

/// Trains in place, calling `on_step` after every update.
pub fn train_with(
    net: &mut Network<f32>,
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    let scale = net.scale();
    cfg.validate(scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (lr_batch, hr_batch) = sample_batch(pairs, scale, cfg, &mut rng)?;
        let (loss, grads) = loss_and_grads(net, &lr_batch, &hr_batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = cfg.learning_rate_at(step);
        adam_step(net, &grads, &mut state, lr, cfg);
        let record = LossRecord { step, lr, loss };
        on_step(&record);
        trace.push(record);
    }
    Ok(trace)
}

pub fn train(net: &mut Network<f32>, pairs: &[ImagePair], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    train_with(net, pairs, cfg, |_| {})
}

/// Trains a scale-2 copy of `config` on `pairs_x2`, moves its head, body
/// and feature tail into a fresh scale-4 network and trains that on
/// `pairs_x4`. The scale-4 upsampler and output convolution keep their
/// initialisation.
pub fn pretrain_x2_then_x4(
    config: &NetworkConfig,
    pairs_x2: &[ImagePair],
    cfg_x2: &TrainConfig,
    pairs_x4: &[ImagePair],
    cfg_x4: &TrainConfig,
    seed: u64,
) -> Result<(Network<f32>, Vec<LossRecord>, Vec<LossRecord>)> {
    let mut x2 = Network::build(&NetworkConfig { scale: 2, ..config.clone() }, seed)?;
    let trace_x2 = train(&mut x2, pairs_x2, cfg_x2)?;
    let mut x4 = Network::build(&NetworkConfig { scale: 4, ..config.clone() }, seed.wrapping_add(1))?;
    x4.transfer_features(&x2)?;
    let trace_x4 = train(&mut x4, pairs_x4, cfg_x4)?;
    Ok((x4, trace_x2, trace_x4))
}

fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / total).collect();
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, c)| c * plane[y * w + wrap(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, c)| c * tmp[wrap(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// A band-limited random texture: blurred noise with random colour tints
/// plus a few soft straight edges, rounded to 8-bit values.
pub fn synthetic_image(size: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let n = size * size;
    let sigma = rng.random_range(0.8..2.5);
    let mut noise = |amp: f64| -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = gaussian_blur(&raw, size, size, sigma);
        let sd = (b.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
        b.into_iter().map(|v| v / sd * amp).collect()
    };
    let luma = noise(35.0);
    let chroma: Vec<Vec<f64>> = (0..3).map(|_| noise(10.0)).collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(90.0..165.0));
    let mut planes: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..n).map(|i| base[c] + luma[i] + chroma[c][i]).collect())
        .collect();
    for _ in 0..rng.random_range(1..=3) {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (ny, nx) = (theta.sin(), theta.cos());
        let offset = rng.random_range(0.25..0.75) * size as f64;
        let step: [f64; 3] = std::array::from_fn(|_| rng.random_range(-60.0..60.0));
        let centre = size as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let d = (y as f64 - centre) * ny + (x as f64 - centre) * nx + centre - offset;
                let s = 1.0 / (1.0 + (-2.0 * d).exp());
                for c in 0..3 {
                    planes[c][y * size + x] += step[c] * s;
                }
            }
        }
    }
    let data = planes
        .into_iter()
        .flatten()
        .map(|v| v.round().clamp(0.0, 255.0) as f32)
        .collect();
    Tensor::new(Shape::new(1, 3, size, size), data).expect("consistent size")
}

/// `count` synthetic images of `size x size` with bicubic-degraded
/// counterparts, fully determined by `seed`.
pub fn synthetic_dataset(count: usize, size: usize, scale: usize, seed: u64) -> Result<Vec<ImagePair>> {
    if size % scale != 0 {
        return Err(Error::Config(format!("size {size} is not divisible by scale {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| ImagePair::from_hr(format!("synthetic{i:04}"), &synthetic_image(size, &mut rng), scale, Degradation::Bicubic))
        .collect()
}
