use rand::RngCore;

use super::{check_kernel_size, expect_conv, expect_count, BlockKind, BlockParams, BlockSpec, ResidualBlock};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{he_uniform, Binder};
use crate::tensor::Scalar;

/// Two full convolutions with a ReLU between them and an identity skip.
#[derive(Debug)]
pub struct StandardBlock<T: Scalar> {
    params: BlockParams<T>,
}

impl<T: Scalar> StandardBlock<T> {
    pub fn new(params: BlockParams<T>) -> Result<Self> {
        let s = params.spec;
        if s.kind != BlockKind::StandardResidual {
            return Err(Error::Config(format!("{} parameters given to standard block", s.kind)));
        }
        check_kernel_size(s.kernel_size)?;
        expect_count(&params, 2)?;
        for w in &params.weights {
            expect_conv(w, s.channels, s.channels, s.kernel_size, 1)?;
        }
        Ok(StandardBlock { params })
    }

    pub fn init(spec: &BlockSpec, prefix: &str, rng: &mut dyn RngCore) -> Result<Self> {
        let (c, k) = (spec.channels, spec.kernel_size);
        check_kernel_size(k)?;
        Self::new(BlockParams {
            spec: *spec,
            weights: vec![
                he_uniform(format!("{prefix}.conv1"), c, c, k, 1, rng),
                he_uniform(format!("{prefix}.conv2"), c, c, k, 1, rng),
            ],
        })
    }
}

impl<T: Scalar> ResidualBlock<T> for StandardBlock<T> {
    fn params(&self) -> &BlockParams<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut BlockParams<T> {
        &mut self.params
    }

    fn forward(&self, x: &Var<T>, b: &mut Binder<T>) -> Result<Var<T>> {
        let [c1, c2] = &self.params.weights[..] else {
            unreachable!("validated in new")
        };
        let h = b.conv(x, c1)?.relu()?;
        x.add(&b.conv(&h, c2)?)
    }
}
