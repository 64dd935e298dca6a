//! Parameter and multiply-accumulate counts, and the closed-form
//! computation-reduction ratios of the lightweight blocks.
//!
//! MACs count `C_out * C_in / groups * k_h * k_w * H_out * W_out` per
//! convolution; additions, activations, biases and resampling are free.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{BlockKind, BlockRegistry, BlockSpec, ResidualBlock};
use crate::error::Result;
use crate::network::{HybridMode, Network, NetworkConfig, ReplacementLocation};
use crate::tensor::{ConvWeights, Scalar};

/// `1 / (2 Dk^2) + alpha1 / N`.
pub fn reduction_shuffle(alpha1: f64, dk: usize, n: usize) -> f64 {
    let dk2 = (dk * dk) as f64;
    1.0 / (2.0 * dk2) + alpha1 / n as f64
}

/// `2 beta alpha1^2 / Dk^2 + alpha1 beta / N`.
pub fn reduction_idle(alpha1: f64, beta: f64, dk: usize, n: usize) -> f64 {
    let dk2 = (dk * dk) as f64;
    2.0 * beta * alpha1 * alpha1 / dk2 + alpha1 * beta / n as f64
}

/// `alpha2 / Dk^2 + (1 - alpha2) / M`.
pub fn reduction_ghost(alpha2: f64, dk: usize, m: usize) -> f64 {
    alpha2 / (dk * dk) as f64 + (1.0 - alpha2) / m as f64
}

/// `alpha^2`.
pub fn reduction_split(alpha: f64) -> f64 {
    alpha * alpha
}

/// Closed-form ratio for `kind` at `N = channels`.
pub fn reduction(spec: &BlockSpec) -> f64 {
    let (a, dk, n) = (spec.alpha, spec.kernel_size, spec.channels);
    match spec.kind {
        BlockKind::StandardResidual => 1.0,
        BlockKind::SplitSr => reduction_split(a),
        BlockKind::Shuffle => reduction_shuffle(a, dk, n),
        BlockKind::Idle => reduction_idle(a, spec.beta, dk, n),
        BlockKind::Ghost => reduction_ghost(a, dk, n),
    }
}

/// MACs of the standard computation a block's closed-form ratio is taken
/// against.
///
/// The SplitSR ratio compares the block with the standard residual block
/// it replaces (two `Dk x Dk` `N -> N` convolutions). The shuffle, idle
/// and ghost ratios compare with a single such convolution, which is the
/// cost their closed forms are derived from.
pub fn reference_macs(spec: &BlockSpec, h: usize, w: usize) -> u64 {
    let one = (spec.kernel_size * spec.kernel_size * spec.channels * spec.channels * h * w) as u64;
    match spec.kind {
        BlockKind::StandardResidual | BlockKind::SplitSr => 2 * one,
        BlockKind::Shuffle | BlockKind::Idle | BlockKind::Ghost => one,
    }
}

/// Counted block MACs divided by [`reference_macs`].
pub fn measured_reduction(spec: &BlockSpec, h: usize, w: usize) -> Result<f64> {
    let block = BlockRegistry::<f32>::builtin()
        .get(spec.kind)?
        .init(spec, "probe", &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(block.macs(h, w) as f64 / reference_macs(spec, h, w) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    /// Input height and width the MACs refer to.
    pub input: [usize; 2],
    pub per_stage: Vec<StageCost>,
    pub reductions: BTreeMap<String, f64>,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "input {}x{}\n{:<12} {:>10} {:>16}\n",
            self.input[0], self.input[1], "stage", "params", "macs"
        );
        for st in &self.per_stage {
            s += &format!("{:<12} {:>10} {:>16}\n", st.name, st.params, st.macs);
        }
        s += &format!("{:<12} {:>10} {:>16}\n", "total", self.params, self.macs);
        if !self.reductions.is_empty() {
            s += "\nclosed-form reduction ratios\n";
            for (k, v) in &self.reductions {
                s += &format!("{k:<18} {v:.6}\n");
            }
        }
        s
    }
}

/// Sums `(stage, convolution, input height, input width)` entries into
/// stages, keeping first-seen stage order.
pub fn count_convs<'a, T: Scalar + 'a>(
    sites: impl IntoIterator<Item = (&'a str, &'a ConvWeights<T>, usize, usize)>,
) -> CostReport {
    let (params, macs, per_stage) = tally(sites);
    CostReport {
        params,
        macs,
        input: [0, 0],
        per_stage,
        reductions: BTreeMap::new(),
    }
}

fn tally<'a, T: Scalar + 'a>(
    sites: impl IntoIterator<Item = (&'a str, &'a ConvWeights<T>, usize, usize)>,
) -> (u64, u64, Vec<StageCost>) {
    let mut stages: Vec<StageCost> = Vec::new();
    for (stage, w, h, wd) in sites {
        let (p, m) = (w.param_count() as u64, w.macs(h, wd));
        match stages.iter_mut().find(|s| s.name == stage) {
            Some(s) => {
                s.params += p;
                s.macs += m;
            }
            None => stages.push(StageCost {
                name: stage.to_string(),
                params: p,
                macs: m,
            }),
        }
    }
    let params = stages.iter().map(|s| s.params).sum();
    let macs = stages.iter().map(|s| s.macs).sum();
    (params, macs, stages)
}

/// Closed-form ratios of all four lightweight blocks at a network's
/// feature width, split ratio and expansion ratio.
pub fn network_reductions(config: &NetworkConfig) -> BTreeMap<String, f64> {
    [BlockKind::SplitSr, BlockKind::Shuffle, BlockKind::Idle, BlockKind::Ghost]
        .into_iter()
        .map(|kind| {
            let spec = BlockSpec::new(kind, config.feature_maps, config.alpha).with_beta(config.beta);
            (kind.name().to_string(), reduction(&spec))
        })
        .collect()
}

pub fn count_network<T: Scalar>(net: &Network<T>, h: usize, w: usize) -> CostReport {
    let sites = net.conv_sites();
    let (params, macs, per_stage) = tally(
        sites
            .iter()
            .map(|s| (s.stage, s.weights, h * s.resolution, w * s.resolution)),
    );
    CostReport {
        params,
        macs,
        input: [h, w],
        per_stage,
        reductions: network_reductions(net.config()),
    }
}

/// One stage per convolution, named after the weight.
pub fn count_block<T: Scalar>(block: &dyn ResidualBlock<T>, h: usize, w: usize) -> CostReport {
    let weights = &block.params().weights;
    let (params, macs, per_stage) = tally(weights.iter().map(|c| (c.name.as_str(), c, h, w)));
    let spec = block.params().spec;
    CostReport {
        params,
        macs,
        input: [h, w],
        per_stage,
        reductions: BTreeMap::from([(spec.kind.name().to_string(), reduction(&spec))]),
    }
}

/// One row of a parameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sweep {
    pub title: String,
    pub rows: Vec<SweepRow>,
}

fn sweep(title: &str, variants: Vec<(String, NetworkConfig)>) -> Result<Sweep> {
    let rows = variants
        .into_iter()
        .map(|(setting, cfg)| {
            Ok(SweepRow {
                setting,
                params: Network::<f32>::build(&cfg, 0)?.param_count() as u64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Sweep {
        title: title.to_string(),
        rows,
    })
}

/// Parameter counts when varying one hyperparameter of `base` at a time:
/// split ratio, hybrid index, hybrid mode and replacement location.
pub fn parameter_sweeps(base: &NetworkConfig) -> Result<Vec<Sweep>> {
    let with = |f: &dyn Fn(&mut NetworkConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    Ok(vec![
        sweep(
            "channel-split ratio",
            [0.125, 0.25, 0.5, 1.0]
                .into_iter()
                .map(|a| (format!("alpha = {a:.3}"), with(&|c| c.alpha = a)))
                .collect(),
        )?,
        sweep(
            "hybrid index",
            (2..=4)
                .filter(|&hi| hi <= base.groups)
                .map(|hi| (format!("HI = {hi}"), with(&|c| c.hybrid_index = hi)))
                .collect(),
        )?,
        sweep(
            "hybrid mode",
            HybridMode::ALL
                .iter()
                .map(|&m| (m.name().to_string(), with(&|c| c.hybrid_mode = m)))
                .collect(),
        )?,
        sweep(
            "replacement location",
            ReplacementLocation::ALL
                .iter()
                .map(|&l| (l.name().to_string(), with(&|c| c.replacement_location = l)))
                .collect(),
        )?,
    ])
}

/// Whole thousands, truncated: `94371 -> "94k"`.
pub fn thousands(n: u64) -> String {
    format!("{}k", n / 1000)
}

pub fn render_sweeps(sweeps: &[Sweep]) -> String {
    let mut s = String::new();
    for sw in sweeps {
        s += &format!("{}\n{:<26} {:>8} {:>10}\n", sw.title, "setting", "params", "exact");
        for r in &sw.rows {
            s += &format!("{:<26} {:>8} {:>10}\n", r.setting, thousands(r.params), r.params);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn worked_values() {
        assert_relative_eq!(reduction_shuffle(0.5, 3, 16), 1.0 / 18.0 + 0.5 / 16.0);
        assert_relative_eq!(reduction_shuffle(0.5, 3, 16), 0.086805, epsilon = 1e-6);
        assert_relative_eq!(reduction_shuffle(0.5, 3, 64), 0.063368, epsilon = 1e-6);
        assert_relative_eq!(reduction_idle(0.25, 1.0, 3, 16), 0.029513, epsilon = 1e-6);
        assert_relative_eq!(reduction_ghost(0.5, 3, 16), 0.086805, epsilon = 1e-6);
        assert_relative_eq!(reduction_ghost(0.5, 3, 64), 0.063368, epsilon = 1e-6);
        assert_eq!(reduction_ghost(1.0, 3, 16), 1.0 / 9.0);
        assert_eq!(reduction_split(0.25), 0.0625);
        assert_eq!(reduction_split(0.5), 0.25);
        assert_eq!(reduction_split(1.0), 1.0);
    }

    #[test]
    fn idle_matches_shuffle_only_at_half() {
        assert_eq!(reduction_idle(0.5, 1.0, 3, 16), reduction_shuffle(0.5, 3, 16));
        assert_ne!(reduction_idle(0.25, 1.0, 3, 16), reduction_shuffle(0.25, 3, 16));
        assert_relative_eq!(
            reduction_idle(0.5, 2.0, 3, 16),
            2.0 * reduction_idle(0.5, 1.0, 3, 16)
        );
    }

    #[test]
    fn thousands_rounds() {
        assert_eq!(thousands(94_371), "94k");
        assert_eq!(thousands(172_563), "172k");
        assert_eq!(thousands(0), "0k");
    }
}
