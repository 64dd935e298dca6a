//! Interchangeable upscaling methods, selected by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::eval::ImagePair;
use crate::network::Network;
use crate::tensor::{bicubic_resize, bilinear_resize, Tensor};

pub trait Upscaler: Send + Sync {
    fn name(&self) -> &str;

    /// Upscales `(N, 3, H, W)` by an integer factor.
    fn upscale(&self, lr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>>;

    /// Upscales the low-resolution side of an evaluation pair.
    fn upscale_pair(&self, pair: &ImagePair, scale: usize) -> Result<Tensor<f32>> {
        self.upscale(&pair.lr, scale)
    }
}

pub struct Bilinear;

impl Upscaler for Bilinear {
    fn name(&self) -> &str {
        "bilinear"
    }

    fn upscale(&self, lr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
        bilinear_resize(lr, scale as f64)
    }
}

pub struct Bicubic;

impl Upscaler for Bicubic {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn upscale(&self, lr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
        bicubic_resize(lr, scale as f64)
    }
}

/// Returns the high-resolution reference unchanged. Checks the metric
/// pipeline end to end.
pub struct Passthrough;

impl Upscaler for Passthrough {
    fn name(&self) -> &str {
        "passthrough"
    }

    fn upscale(&self, _lr: &Tensor<f32>, _scale: usize) -> Result<Tensor<f32>> {
        Err(Error::invalid("passthrough", "needs a reference image"))
    }

    fn upscale_pair(&self, pair: &ImagePair, _scale: usize) -> Result<Tensor<f32>> {
        Ok(pair.hr.clone())
    }
}

/// A trained network, clamped to `[0, 255]`.
pub struct Model {
    name: String,
    net: Arc<Network<f32>>,
}

impl Model {
    pub fn new(name: impl Into<String>, net: Arc<Network<f32>>) -> Self {
        Model {
            name: name.into(),
            net,
        }
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }
}

impl Upscaler for Model {
    fn name(&self) -> &str {
        &self.name
    }

    fn upscale(&self, lr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
        if scale != self.net.scale() {
            return Err(Error::invalid(
                "model",
                format!("network upscales by {}, requested {scale}", self.net.scale()),
            ));
        }
        Ok(self.net.forward(lr)?.map(|v| v.clamp(0.0, 255.0)))
    }
}

#[derive(Clone, Default)]
pub struct UpscalerRegistry {
    methods: BTreeMap<String, Arc<dyn Upscaler>>,
}

impl UpscalerRegistry {
    /// Bilinear, bicubic and passthrough.
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(Bilinear));
        r.register(Arc::new(Bicubic));
        r.register(Arc::new(Passthrough));
        r
    }

    /// Adds or replaces the method registered under its name.
    pub fn register(&mut self, method: Arc<dyn Upscaler>) {
        self.methods.insert(method.name().to_string(), method);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Upscaler>> {
        self.methods.get(name).cloned().ok_or_else(|| Error::UnknownName {
            kind: "upscaler",
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.methods.keys().map(String::as_str).collect()
    }
}
