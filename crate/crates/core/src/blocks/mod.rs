//! Shape-preserving residual blocks.
//!
//! Every block variant implements [`ResidualBlock`] and is created through
//! a [`BlockFactory`] registered by name in a [`BlockRegistry`], so
//! networks pick their lightweight block from configuration at runtime.

mod ghost;
mod idle;
mod shuffle;
mod split;
mod standard;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::Binder;
use crate::tensor::{ConvWeights, Scalar, Tensor};

pub use ghost::GhostBlock;
pub use idle::IdleBlock;
pub use shuffle::ShuffleBlock;
pub use split::SplitSrBlock;
pub use standard::StandardBlock;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    StandardResidual,
    SplitSr,
    Shuffle,
    Idle,
    Ghost,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] = [
        BlockKind::StandardResidual,
        BlockKind::SplitSr,
        BlockKind::Shuffle,
        BlockKind::Idle,
        BlockKind::Ghost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::StandardResidual => "standard_residual",
            BlockKind::SplitSr => "split_sr",
            BlockKind::Shuffle => "shuffle",
            BlockKind::Idle => "idle",
            BlockKind::Ghost => "ghost",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "splitsr" && *k == BlockKind::SplitSr))
            .ok_or_else(|| Error::UnknownName {
                kind: "block kind",
                name: s.to_string(),
            })
    }
}

/// Structural hyperparameters of one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// External channel count `C`; input and output agree.
    pub channels: usize,
    /// Split ratio for SplitSR, Shuffle and Idle; intrinsic-map fraction
    /// for Ghost. Ignored by the standard block.
    pub alpha: f64,
    /// Idle expansion ratio.
    pub beta: f64,
    /// Spatial kernel size of the standard and depthwise convolutions.
    pub kernel_size: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, channels: usize, alpha: f64) -> Self {
        BlockSpec {
            kind,
            channels,
            alpha,
            beta: 1.0,
            kernel_size: 3,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_kernel_size(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }
}

/// Hyperparameters plus the block's convolutions in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = f32> {
    pub spec: BlockSpec,
    pub weights: Vec<ConvWeights<T>>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(ConvWeights::param_count).sum()
    }

    pub fn cast<U: Scalar>(&self) -> BlockParams<U> {
        BlockParams {
            spec: self.spec,
            weights: self.weights.iter().map(ConvWeights::cast).collect(),
        }
    }
}

/// A residual block mapping `(N, C, H, W)` to `(N, C, H, W)`.
pub trait ResidualBlock<T: Scalar>: fmt::Debug + Send + Sync {
    fn params(&self) -> &BlockParams<T>;

    fn params_mut(&mut self) -> &mut BlockParams<T>;

    fn forward(&self, x: &Var<T>, binder: &mut Binder<T>) -> Result<Var<T>>;

    fn kind(&self) -> BlockKind {
        self.params().spec.kind
    }

    fn param_count(&self) -> usize {
        self.params().param_count()
    }

    /// Convolution multiply-accumulates on an `h x w` feature map.
    fn macs(&self, h: usize, w: usize) -> u64 {
        self.params().weights.iter().map(|c| c.macs(h, w)).sum()
    }
}

/// Creates blocks of one kind.
pub trait BlockFactory<T: Scalar>: Send + Sync {
    fn kind(&self) -> BlockKind;

    /// Fresh block with He-uniform weights named under `prefix`.
    fn init(&self, spec: &BlockSpec, prefix: &str, rng: &mut dyn RngCore) -> Result<Box<dyn ResidualBlock<T>>>;

    /// Block around existing weights; shapes are validated.
    fn from_params(&self, params: BlockParams<T>) -> Result<Box<dyn ResidualBlock<T>>>;
}

struct Factory<T, B> {
    kind: BlockKind,
    init: fn(&BlockSpec, &str, &mut dyn RngCore) -> Result<B>,
    wrap: fn(BlockParams<T>) -> Result<B>,
}

impl<T, B> BlockFactory<T> for Factory<T, B>
where
    T: Scalar,
    B: ResidualBlock<T> + 'static,
{
    fn kind(&self) -> BlockKind {
        self.kind
    }

    fn init(&self, spec: &BlockSpec, prefix: &str, rng: &mut dyn RngCore) -> Result<Box<dyn ResidualBlock<T>>> {
        if spec.kind != self.kind {
            return Err(Error::Config(format!(
                "{} factory asked to build a {} block",
                self.kind, spec.kind
            )));
        }
        Ok(Box::new((self.init)(spec, prefix, rng)?))
    }

    fn from_params(&self, params: BlockParams<T>) -> Result<Box<dyn ResidualBlock<T>>> {
        if params.spec.kind != self.kind {
            return Err(Error::Config(format!(
                "{} factory given {} parameters",
                self.kind, params.spec.kind
            )));
        }
        Ok(Box::new((self.wrap)(params)?))
    }
}

/// Block factories looked up by kind or name.
pub struct BlockRegistry<T: Scalar> {
    factories: Vec<Box<dyn BlockFactory<T>>>,
}

impl<T: Scalar> Default for BlockRegistry<T> {
    fn default() -> Self {
        Self::builtin()
    }
}

impl<T: Scalar> BlockRegistry<T> {
    pub fn empty() -> Self {
        BlockRegistry {
            factories: Vec::new(),
        }
    }

    /// The standard residual block and the four lightweight blocks.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Factory {
            kind: BlockKind::StandardResidual,
            init: StandardBlock::<T>::init,
            wrap: StandardBlock::<T>::new,
        }));
        r.register(Box::new(Factory {
            kind: BlockKind::SplitSr,
            init: SplitSrBlock::<T>::init,
            wrap: SplitSrBlock::<T>::new,
        }));
        r.register(Box::new(Factory {
            kind: BlockKind::Shuffle,
            init: ShuffleBlock::<T>::init,
            wrap: ShuffleBlock::<T>::new,
        }));
        r.register(Box::new(Factory {
            kind: BlockKind::Idle,
            init: IdleBlock::<T>::init,
            wrap: IdleBlock::<T>::new,
        }));
        r.register(Box::new(Factory {
            kind: BlockKind::Ghost,
            init: GhostBlock::<T>::init,
            wrap: GhostBlock::<T>::new,
        }));
        r
    }

    /// Adds a factory, replacing any previous one of the same kind.
    pub fn register(&mut self, factory: Box<dyn BlockFactory<T>>) {
        self.factories.retain(|f| f.kind() != factory.kind());
        self.factories.push(factory);
    }

    pub fn get(&self, kind: BlockKind) -> Result<&dyn BlockFactory<T>> {
        self.factories
            .iter()
            .find(|f| f.kind() == kind)
            .map(|f| f.as_ref())
            .ok_or_else(|| Error::UnknownName {
                kind: "block kind",
                name: kind.name().to_string(),
            })
    }

    pub fn by_name(&self, name: &str) -> Result<&dyn BlockFactory<T>> {
        self.get(name.parse()?)
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.factories.iter().map(|f| f.kind()).collect()
    }
}

/// Runs one block eagerly.
pub fn run_block<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    let block = BlockRegistry::<T>::builtin().get(p.spec.kind)?.from_params(p.clone())?;
    let y = block.forward(&Var::constant(x.clone()), &mut Binder::inference())?;
    Ok(y.into_value())
}

fn run_kind<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>, kind: BlockKind) -> Result<Tensor<T>> {
    if p.spec.kind != kind {
        return Err(Error::Config(format!(
            "expected {kind} parameters, got {}",
            p.spec.kind
        )));
    }
    run_block(x, p)
}

/// `x + conv2(relu(conv1(x)))`.
pub fn standard_residual_block<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    run_kind(x, p, BlockKind::StandardResidual)
}

/// Channel-split residual block with reversed concatenation.
pub fn split_sr_block<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    run_kind(x, p, BlockKind::SplitSr)
}

pub fn shuffle_block<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    run_kind(x, p, BlockKind::Shuffle)
}

pub fn idle_block<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    run_kind(x, p, BlockKind::Idle)
}

pub fn ghost_block<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    run_kind(x, p, BlockKind::Ghost)
}

/// Checks a convolution's channel counts and kernel against expectations.
pub(crate) fn expect_conv<T: Scalar>(
    w: &ConvWeights<T>,
    c_in: usize,
    c_out: usize,
    k: usize,
    groups: usize,
) -> Result<()> {
    let ok = w.c_in() == c_in
        && w.c_out() == c_out
        && w.kernel_size() == (k, k)
        && w.groups == groups
        && w.stride == 1
        && w.padding == k / 2;
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "conv `{}` is {}->{} k{:?} g{}, expected {c_in}->{c_out} k{k} g{groups}",
            w.name,
            w.c_in(),
            w.c_out(),
            w.kernel_size(),
            w.groups
        )))
    }
}

pub(crate) fn expect_count<T: Scalar>(p: &BlockParams<T>, n: usize) -> Result<()> {
    if p.weights.len() == n {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} block expects {n} convolutions, got {}",
            p.spec.kind,
            p.weights.len()
        )))
    }
}

pub(crate) fn check_kernel_size(k: usize) -> Result<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("kernel size must be odd, got {k}")))
    }
}
