use rand::RngCore;

use super::{check_kernel_size, expect_conv, expect_count, BlockKind, BlockParams, BlockSpec, ResidualBlock};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{he_uniform, Binder};
use crate::tensor::{split_index, Scalar};

/// Split, then an inverted residual (expand, depthwise, project) on the
/// active branch; concatenated in original order without a shuffle.
#[derive(Debug)]
pub struct IdleBlock<T: Scalar> {
    params: BlockParams<T>,
}

/// Width of the expanded representation: `round(beta * active)`.
fn expanded(beta: f64, active: usize) -> Result<usize> {
    if !(beta >= 1.0 && beta.is_finite()) {
        return Err(Error::Config(format!("expansion ratio must be >= 1, got {beta}")));
    }
    Ok((beta * active as f64 + 0.5).floor() as usize)
}

impl<T: Scalar> IdleBlock<T> {
    pub fn new(params: BlockParams<T>) -> Result<Self> {
        let s = params.spec;
        if s.kind != BlockKind::Idle {
            return Err(Error::Config(format!("{} parameters given to idle block", s.kind)));
        }
        check_kernel_size(s.kernel_size)?;
        let a = split_index(s.alpha, s.channels)?;
        let e = expanded(s.beta, a)?;
        expect_count(&params, 3)?;
        expect_conv(&params.weights[0], a, e, 1, 1)?;
        expect_conv(&params.weights[1], e, e, s.kernel_size, e)?;
        expect_conv(&params.weights[2], e, a, 1, 1)?;
        Ok(IdleBlock { params })
    }

    pub fn init(spec: &BlockSpec, prefix: &str, rng: &mut dyn RngCore) -> Result<Self> {
        check_kernel_size(spec.kernel_size)?;
        let a = split_index(spec.alpha, spec.channels)?;
        let e = expanded(spec.beta, a)?;
        Self::new(BlockParams {
            spec: *spec,
            weights: vec![
                he_uniform(format!("{prefix}.expand"), a, e, 1, 1, rng),
                he_uniform(format!("{prefix}.dw"), e, e, spec.kernel_size, e, rng),
                he_uniform(format!("{prefix}.project"), e, a, 1, 1, rng),
            ],
        })
    }

    pub fn expansion_width(&self) -> usize {
        self.params.weights[0].c_out()
    }
}

impl<T: Scalar> ResidualBlock<T> for IdleBlock<T> {
    fn params(&self) -> &BlockParams<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut BlockParams<T> {
        &mut self.params
    }

    fn forward(&self, x: &Var<T>, b: &mut Binder<T>) -> Result<Var<T>> {
        let [expand, dw, project] = &self.params.weights[..] else {
            unreachable!("validated in new")
        };
        let (active, idle) = x.split(self.params.spec.alpha)?;
        let h = b.conv(&active, expand)?.relu()?;
        let h = b.conv(&h, dw)?.relu()?;
        let h = b.conv(&h, project)?;
        if idle.shape().c == 0 {
            return Ok(h);
        }
        h.concat(&idle)
    }
}
