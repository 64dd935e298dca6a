//! The hybrid residual-group super-resolution network.
//!
//! Four stages: a 3x3 head convolution, `G` residual groups (each a run of
//! blocks, a tail convolution and a short skip) closed by a tail
//! convolution with a long skip back to the head output, an upsampler of
//! convolution plus pixel-shuffle stages, and a 3x3 output convolution.

mod config;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::blocks::{BlockKind, BlockParams, BlockRegistry, BlockSpec, ResidualBlock};
use crate::error::{Error, Result};
use crate::layers::{he_uniform, Binder};
use crate::tensor::{ConvWeights, Scalar, Tensor};

pub use config::{
    plan_groups, GroupRole, HybridMode, NetworkConfig, Preset, ReplacementLocation, RGB_MEAN,
};

pub struct ResidualGroup<T: Scalar> {
    pub role: GroupRole,
    pub blocks: Vec<Box<dyn ResidualBlock<T>>>,
    pub tail: ConvWeights<T>,
}

impl<T: Scalar> fmt::Debug for ResidualGroup<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResidualGroup")
            .field("role", &self.role)
            .field("blocks", &self.blocks.len())
            .field("tail", &self.tail.name)
            .finish()
    }
}

/// A convolution together with the stage it belongs to and the factor by
/// which its input resolution exceeds the network input.
#[derive(Clone, Copy, Debug)]
pub struct ConvSite<'a, T> {
    pub stage: &'a str,
    pub weights: &'a ConvWeights<T>,
    pub resolution: usize,
}

#[derive(Debug)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    head: ConvWeights<T>,
    groups: Vec<ResidualGroup<T>>,
    fe_tail: ConvWeights<T>,
    upsampler: Vec<ConvWeights<T>>,
    output: ConvWeights<T>,
    stage_names: Vec<String>,
}

fn block_spec(config: &NetworkConfig, role: GroupRole) -> BlockSpec {
    match role {
        GroupRole::Standard => BlockSpec::new(BlockKind::StandardResidual, config.feature_maps, 1.0),
        GroupRole::Lightweight => {
            BlockSpec::new(config.block_kind, config.feature_maps, config.alpha).with_beta(config.beta)
        }
    }
}

/// Convolution reading only the first `c_in` channels of its input.
fn narrow_conv<T: Scalar>(x: &Var<T>, w: &ConvWeights<T>, b: &mut Binder<T>) -> Result<Var<T>> {
    if w.c_in() == x.shape().c {
        b.conv(x, w)
    } else {
        b.conv(&x.slice_channels(0, w.c_in())?, w)
    }
}

fn mean_offsets(sign: f64) -> Vec<f64> {
    RGB_MEAN.iter().map(|m| sign * m).collect()
}

impl<T: Scalar> Network<T> {
    /// Builds a network with He-uniform weights drawn from a stream seeded
    /// by `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = plan_groups(config)?;
        let registry = BlockRegistry::<T>::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.feature_maps;
        let tail_in = config.tail_input();

        let head = he_uniform("head", 3, f, 3, 1, &mut rng);
        let mut groups = Vec::with_capacity(config.groups);
        for (g, role) in plan.into_iter().enumerate() {
            let spec = block_spec(config, role);
            let factory = registry.get(spec.kind)?;
            let blocks = (0..config.blocks_per_group)
                .map(|b| factory.init(&spec, &format!("group{g}.block{b}"), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let tail = he_uniform(format!("group{g}.tail"), tail_in, f, 3, 1, &mut rng);
            groups.push(ResidualGroup { role, blocks, tail });
        }
        let fe_tail = he_uniform("fe_tail", tail_in, f, 3, 1, &mut rng);
        let upsampler = (0..Self::upsample_stages(config.scale))
            .map(|i| he_uniform(format!("upsample{i}"), config.upsampler_input(), 4 * f, 3, 1, &mut rng))
            .collect();
        let output = he_uniform("output", tail_in, 3, 3, 1, &mut rng);
        Ok(Self::assemble(config.clone(), head, groups, fe_tail, upsampler, output))
    }

    fn assemble(
        config: NetworkConfig,
        head: ConvWeights<T>,
        groups: Vec<ResidualGroup<T>>,
        fe_tail: ConvWeights<T>,
        upsampler: Vec<ConvWeights<T>>,
        output: ConvWeights<T>,
    ) -> Self {
        let stage_names = (0..groups.len()).map(|g| format!("group{g}")).collect();
        Network {
            config,
            head,
            groups,
            fe_tail,
            upsampler,
            output,
            stage_names,
        }
    }

    fn upsample_stages(scale: usize) -> usize {
        scale.trailing_zeros() as usize
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    pub fn groups(&self) -> &[ResidualGroup<T>] {
        &self.groups
    }

    /// Every convolution in execution order.
    pub fn conv_sites(&self) -> Vec<ConvSite<'_, T>> {
        let site = |stage, weights, resolution| ConvSite {
            stage,
            weights,
            resolution,
        };
        let mut out = vec![site("head", &self.head, 1)];
        for (g, group) in self.groups.iter().enumerate() {
            let stage = self.stage_names[g].as_str();
            for block in &group.blocks {
                out.extend(block.params().weights.iter().map(|w| site(stage, w, 1)));
            }
            out.push(site(stage, &group.tail, 1));
        }
        out.push(site("fe_tail", &self.fe_tail, 1));
        out.extend(
            self.upsampler
                .iter()
                .enumerate()
                .map(|(i, w)| site("upsampler", w, 1 << i)),
        );
        out.push(site("output", &self.output, self.config.scale));
        out
    }

    pub fn weights(&self) -> Vec<&ConvWeights<T>> {
        self.conv_sites().into_iter().map(|s| s.weights).collect()
    }

    pub fn weights_mut(&mut self) -> Vec<&mut ConvWeights<T>> {
        let mut out = vec![&mut self.head];
        for group in &mut self.groups {
            for block in &mut group.blocks {
                out.extend(block.params_mut().weights.iter_mut());
            }
            out.push(&mut group.tail);
        }
        out.push(&mut self.fe_tail);
        out.extend(self.upsampler.iter_mut());
        out.push(&mut self.output);
        out
    }

    pub fn param_count(&self) -> usize {
        self.weights().iter().map(|w| w.param_count()).sum()
    }

    /// Upscales a batch of RGB images with values nominally in `[0, 255]`.
    pub fn forward(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward_var(&Var::constant(lr.clone()), &mut Binder::inference())?;
        Ok(y.into_value())
    }

    pub fn forward_var(&self, x: &Var<T>, b: &mut Binder<T>) -> Result<Var<T>> {
        if x.shape().c != 3 {
            return Err(Error::Dimension {
                op: "network",
                axis: "C",
                expected: 3,
                actual: x.shape().c,
            });
        }
        let x = if self.config.mean_shift {
            x.shift(&mean_offsets(-1.0))?
        } else {
            x.clone()
        };
        let head = b.conv(&x, &self.head)?;
        let mut h = head.clone();
        for group in &self.groups {
            let skip = h.clone();
            for block in &group.blocks {
                h = block.forward(&h, b)?;
            }
            h = narrow_conv(&h, &group.tail, b)?.add(&skip)?;
        }
        h = narrow_conv(&h, &self.fe_tail, b)?.add(&head)?;
        for up in &self.upsampler {
            h = narrow_conv(&h, up, b)?.pixel_shuffle(2)?;
        }
        let out = narrow_conv(&h, &self.output, b)?;
        if self.config.mean_shift {
            out.shift(&mean_offsets(1.0))
        } else {
            Ok(out)
        }
    }

    /// Rebuilds the architecture of `config` around the given weights,
    /// matched by name. Every convolution must be present with the exact
    /// shape and geometry the architecture expects.
    pub fn from_weights(config: &NetworkConfig, weights: Vec<ConvWeights<T>>) -> Result<Self> {
        let mut net = Self::build(config, 0)?;
        let mut by_name: std::collections::HashMap<String, ConvWeights<T>> =
            weights.into_iter().map(|w| (w.name.clone(), w)).collect();
        for slot in net.weights_mut() {
            let w = by_name.remove(&slot.name).ok_or_else(|| {
                Error::WeightFormat(format!("missing tensor `{}`", slot.name))
            })?;
            check_same_layout(slot, &w)?;
            *slot = w;
        }
        if let Some(name) = by_name.keys().min() {
            return Err(Error::WeightFormat(format!("unexpected tensor `{name}`")));
        }
        net.revalidate_blocks()?;
        Ok(net)
    }

    fn revalidate_blocks(&mut self) -> Result<()> {
        let registry = BlockRegistry::<T>::builtin();
        for group in &mut self.groups {
            for block in &mut group.blocks {
                let params: BlockParams<T> = block.params().clone();
                *block = registry.get(params.spec.kind)?.from_params(params)?;
            }
        }
        Ok(())
    }

    /// Copies the head, residual groups and feature-extraction tail from a
    /// network of another scale; the upsampler and output convolution keep
    /// their own weights.
    pub fn transfer_features(&mut self, from: &Network<T>) -> Result<()> {
        let (a, b) = (&self.config, &from.config);
        let same = (a.feature_maps, a.groups, a.blocks_per_group, a.hybrid_index, a.hybrid_mode, a.block_kind)
            == (b.feature_maps, b.groups, b.blocks_per_group, b.hybrid_index, b.hybrid_mode, b.block_kind)
            && a.alpha == b.alpha
            && a.beta == b.beta
            && a.replacement_location == b.replacement_location;
        if !same {
            return Err(Error::Config(
                "feature transfer needs identical feature-extraction settings".into(),
            ));
        }
        self.head = from.head.clone();
        for (dst, src) in self.groups.iter_mut().zip(&from.groups) {
            for (d, s) in dst.blocks.iter_mut().zip(&src.blocks) {
                d.params_mut().weights = s.params().weights.clone();
            }
            dst.tail = src.tail.clone();
        }
        self.fe_tail = from.fe_tail.clone();
        Ok(())
    }

    /// The same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let registry = BlockRegistry::<U>::builtin();
        let groups = self
            .groups
            .iter()
            .map(|g| ResidualGroup {
                role: g.role,
                blocks: g
                    .blocks
                    .iter()
                    .map(|b| {
                        let p = b.params().cast::<U>();
                        registry
                            .get(p.spec.kind)
                            .and_then(|f| f.from_params(p))
                            .expect("validated block")
                    })
                    .collect(),
                tail: g.tail.cast(),
            })
            .collect();
        Network::assemble(
            self.config.clone(),
            self.head.cast(),
            groups,
            self.fe_tail.cast(),
            self.upsampler.iter().map(ConvWeights::cast).collect(),
            self.output.cast(),
        )
    }
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        self.cast::<T>()
    }
}

fn check_same_layout<T: Scalar>(want: &ConvWeights<T>, got: &ConvWeights<T>) -> Result<()> {
    let same = want.kernel.shape() == got.kernel.shape()
        && want.bias.as_ref().map(Vec::len) == got.bias.as_ref().map(Vec::len)
        && (want.stride, want.padding, want.groups) == (got.stride, got.padding, got.groups);
    if same {
        Ok(())
    } else {
        Err(Error::WeightFormat(format!(
            "tensor `{}` has kernel {} (groups {}), architecture expects {} (groups {})",
            want.name,
            got.kernel.shape(),
            got.groups,
            want.kernel.shape(),
            want.groups
        )))
    }
}
