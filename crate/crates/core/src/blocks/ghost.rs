use rand::RngCore;

use super::{check_kernel_size, expect_conv, expect_count, BlockKind, BlockParams, BlockSpec, ResidualBlock};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{he_uniform, Binder};
use crate::tensor::{split_index, Scalar};

/// A pointwise convolution produces `round(alpha * C)` intrinsic maps; a
/// depthwise convolution derives the remaining ghost maps from them,
/// reusing intrinsic maps cyclically when ghosts outnumber them.
#[derive(Debug)]
pub struct GhostBlock<T: Scalar> {
    params: BlockParams<T>,
}

impl<T: Scalar> GhostBlock<T> {
    pub fn new(params: BlockParams<T>) -> Result<Self> {
        let s = params.spec;
        if s.kind != BlockKind::Ghost {
            return Err(Error::Config(format!("{} parameters given to ghost block", s.kind)));
        }
        check_kernel_size(s.kernel_size)?;
        let m = split_index(s.alpha, s.channels)?;
        let ghosts = s.channels - m;
        expect_count(&params, if ghosts == 0 { 1 } else { 2 })?;
        expect_conv(&params.weights[0], s.channels, m, 1, 1)?;
        if ghosts > 0 {
            expect_conv(&params.weights[1], ghosts, ghosts, s.kernel_size, ghosts)?;
        }
        Ok(GhostBlock { params })
    }

    pub fn init(spec: &BlockSpec, prefix: &str, rng: &mut dyn RngCore) -> Result<Self> {
        check_kernel_size(spec.kernel_size)?;
        let m = split_index(spec.alpha, spec.channels)?;
        let ghosts = spec.channels - m;
        let mut weights = vec![he_uniform(format!("{prefix}.primary"), spec.channels, m, 1, 1, rng)];
        if ghosts > 0 {
            weights.push(he_uniform(
                format!("{prefix}.cheap"),
                ghosts,
                ghosts,
                spec.kernel_size,
                ghosts,
                rng,
            ));
        }
        Self::new(BlockParams {
            spec: *spec,
            weights,
        })
    }

    pub fn intrinsic_maps(&self) -> usize {
        self.params.weights[0].c_out()
    }

    pub fn ghost_maps(&self) -> usize {
        self.params.spec.channels - self.intrinsic_maps()
    }
}

impl<T: Scalar> ResidualBlock<T> for GhostBlock<T> {
    fn params(&self) -> &BlockParams<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut BlockParams<T> {
        &mut self.params
    }

    fn forward(&self, x: &Var<T>, b: &mut Binder<T>) -> Result<Var<T>> {
        let intrinsic = b.conv(x, &self.params.weights[0])?;
        let m = self.intrinsic_maps();
        let ghosts = self.ghost_maps();
        if ghosts == 0 {
            return Ok(intrinsic);
        }
        let src = if ghosts == m {
            intrinsic.clone()
        } else {
            intrinsic.gather((0..ghosts).map(|j| j % m).collect())?
        };
        let ghost = b.conv(&src, &self.params.weights[1])?;
        intrinsic.concat(&ghost)
    }
}
