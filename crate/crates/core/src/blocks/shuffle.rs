use rand::RngCore;

use super::{check_kernel_size, expect_conv, expect_count, BlockKind, BlockParams, BlockSpec, ResidualBlock};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{he_uniform, Binder};
use crate::tensor::{split_index, Scalar};

/// Split, pointwise-depthwise-pointwise on the active branch, concatenate
/// in original order, then shuffle channels with two groups.
#[derive(Debug)]
pub struct ShuffleBlock<T: Scalar> {
    params: BlockParams<T>,
}

impl<T: Scalar> ShuffleBlock<T> {
    pub fn new(params: BlockParams<T>) -> Result<Self> {
        let s = params.spec;
        if s.kind != BlockKind::Shuffle {
            return Err(Error::Config(format!("{} parameters given to shuffle block", s.kind)));
        }
        if s.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "shuffle block needs an even channel count, got {}",
                s.channels
            )));
        }
        check_kernel_size(s.kernel_size)?;
        let a = split_index(s.alpha, s.channels)?;
        expect_count(&params, 3)?;
        expect_conv(&params.weights[0], a, a, 1, 1)?;
        expect_conv(&params.weights[1], a, a, s.kernel_size, a)?;
        expect_conv(&params.weights[2], a, a, 1, 1)?;
        Ok(ShuffleBlock { params })
    }

    pub fn init(spec: &BlockSpec, prefix: &str, rng: &mut dyn RngCore) -> Result<Self> {
        check_kernel_size(spec.kernel_size)?;
        let a = split_index(spec.alpha, spec.channels)?;
        Self::new(BlockParams {
            spec: *spec,
            weights: vec![
                he_uniform(format!("{prefix}.pw1"), a, a, 1, 1, rng),
                he_uniform(format!("{prefix}.dw"), a, a, spec.kernel_size, a, rng),
                he_uniform(format!("{prefix}.pw2"), a, a, 1, 1, rng),
            ],
        })
    }
}

impl<T: Scalar> ResidualBlock<T> for ShuffleBlock<T> {
    fn params(&self) -> &BlockParams<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut BlockParams<T> {
        &mut self.params
    }

    fn forward(&self, x: &Var<T>, b: &mut Binder<T>) -> Result<Var<T>> {
        let [pw1, dw, pw2] = &self.params.weights[..] else {
            unreachable!("validated in new")
        };
        let (active, idle) = x.split(self.params.spec.alpha)?;
        let h = b.conv(&active, pw1)?.relu()?;
        let h = b.conv(&h, dw)?;
        let h = b.conv(&h, pw2)?.relu()?;
        let y = if idle.shape().c == 0 { h } else { h.concat(&idle)? };
        y.channel_shuffle(2)
    }
}
