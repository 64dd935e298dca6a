use rand::RngCore;

use super::{check_kernel_size, expect_conv, expect_count, BlockKind, BlockParams, BlockSpec, ResidualBlock};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{he_uniform, Binder};
use crate::tensor::{split_index, Scalar};

/// Channel-split residual block.
///
/// The first `round(alpha * C)` channels go through conv-ReLU-conv with an
/// identity skip; the remaining channels pass through untouched. The output
/// puts the idle channels first and the processed ones last, so successive
/// blocks rotate which channels are convolved.
#[derive(Debug)]
pub struct SplitSrBlock<T: Scalar> {
    params: BlockParams<T>,
}

impl<T: Scalar> SplitSrBlock<T> {
    pub fn new(params: BlockParams<T>) -> Result<Self> {
        let s = params.spec;
        if s.kind != BlockKind::SplitSr {
            return Err(Error::Config(format!("{} parameters given to split block", s.kind)));
        }
        check_kernel_size(s.kernel_size)?;
        let active = split_index(s.alpha, s.channels)?;
        expect_count(&params, 2)?;
        for w in &params.weights {
            expect_conv(w, active, active, s.kernel_size, 1)?;
        }
        Ok(SplitSrBlock { params })
    }

    pub fn init(spec: &BlockSpec, prefix: &str, rng: &mut dyn RngCore) -> Result<Self> {
        check_kernel_size(spec.kernel_size)?;
        let a = split_index(spec.alpha, spec.channels)?;
        let k = spec.kernel_size;
        Self::new(BlockParams {
            spec: *spec,
            weights: vec![
                he_uniform(format!("{prefix}.conv1"), a, a, k, 1, rng),
                he_uniform(format!("{prefix}.conv2"), a, a, k, 1, rng),
            ],
        })
    }

    pub fn active_channels(&self) -> usize {
        self.params.weights[0].c_in()
    }
}

impl<T: Scalar> ResidualBlock<T> for SplitSrBlock<T> {
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
        let (active, idle) = x.split(self.params.spec.alpha)?;
        let h = b.conv(&active, c1)?.relu()?;
        let active = active.add(&b.conv(&h, c2)?)?;
        if idle.shape().c == 0 {
            return Ok(active);
        }
        idle.concat(&active)
    }
}
