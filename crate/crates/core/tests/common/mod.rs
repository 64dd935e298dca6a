#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitsr_core::autograd::Var;
use splitsr_core::{Result, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Worst elementwise disagreement between reverse-mode and central
/// finite-difference gradients of `sum(f(inputs) * u)` for a random `u`.
///
/// The error of one element is relative to the larger magnitude of the two
/// estimates, and absolute where both are below `1e-8`.
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs_tiny: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn within(&self, rel: f64) -> bool {
        self.max_rel < rel && self.max_abs_tiny < 1e-4
    }
}

pub fn check_gradients(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    seed: u64,
) -> GradCheck {
    check_gradients_where(inputs, f, seed, |_, _| true)
}

/// As [`check_gradients`], skipping coordinates for which `keep(input, index)`
/// is false.
pub fn check_gradients_where(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    seed: u64,
    keep: impl Fn(usize, usize) -> bool,
) -> GradCheck {
    let mut r = rng(seed);
    let leaves: Vec<Var<f64>> = inputs.iter().cloned().map(Var::leaf).collect();
    let y = f(&leaves).expect("forward");
    let scalar = y.value().len() == 1;
    let u = if scalar {
        Tensor::full(y.shape(), 1.0)
    } else {
        random(y.shape(), -1.0, 1.0, &mut r)
    };
    let grads = y.backward_with(u.clone()).expect("backward");

    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let vars: Vec<Var<f64>> = xs.iter().cloned().map(Var::constant).collect();
        let y = f(&vars).expect("forward");
        y.value().data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
    };

    let h = 1e-6;
    let mut out = GradCheck {
        max_rel: 0.0,
        max_abs_tiny: 0.0,
        checked: 0,
    };
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        for i in 0..inputs[k].len() {
            if !keep(k, i) {
                continue;
            }
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let plus = objective(&xs);
            xs[k].data_mut()[i] = orig - h;
            let minus = objective(&xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-8 {
                out.max_abs_tiny = out.max_abs_tiny.max((a - numeric).abs());
            } else {
                out.max_rel = out.max_rel.max((a - numeric).abs() / scale);
            }
            out.checked += 1;
        }
    }
    out
}
