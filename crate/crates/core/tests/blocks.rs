mod common;

use std::collections::BTreeSet;

use common::{check_gradients, random, rng};
use proptest::prelude::*;
use rand::Rng;
use splitsr_core::autograd::Var;
use splitsr_core::blocks::{
    run_block, split_sr_block, standard_residual_block, BlockKind, BlockParams, BlockRegistry,
    BlockSpec, GhostBlock, IdleBlock, ResidualBlock, SplitSrBlock,
};
use splitsr_core::layers::Binder;
use splitsr_core::tensor::ConvWeights;
use splitsr_core::{Error, Tensor};

fn init(spec: BlockSpec, seed: u64) -> BlockParams<f64> {
    BlockRegistry::<f64>::builtin()
        .get(spec.kind)
        .unwrap()
        .init(&spec, "b", &mut rng(seed))
        .unwrap()
        .params()
        .clone()
}

fn zeroed(mut p: BlockParams<f64>) -> BlockParams<f64> {
    for w in &mut p.weights {
        w.kernel = Tensor::zeros(w.kernel.shape());
        w.bias = w.bias.as_ref().map(|b| vec![0.0; b.len()]);
    }
    p
}

fn channel_index_tensor(c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([1, c, h, w], |[_, ch, _, _]| ch as f64)
}

#[test]
fn standard_block_parameter_count() {
    let p = init(BlockSpec::new(BlockKind::StandardResidual, 16, 1.0), 0);
    assert_eq!(p.param_count(), 2 * (3 * 3 * 16 * 16 + 16));
    assert_eq!(p.param_count(), 4640);
}

#[test]
fn split_block_parameter_count() {
    let p = init(BlockSpec::new(BlockKind::SplitSr, 16, 0.25), 0);
    assert_eq!(p.param_count(), 2 * (3 * 3 * 4 * 4 + 4));
    assert_eq!(p.param_count(), 296);
}

#[test]
fn zero_standard_block_is_identity() {
    let x = random([1, 16, 24, 24], -5.0, 5.0, &mut rng(1));
    let p = zeroed(init(BlockSpec::new(BlockKind::StandardResidual, 16, 1.0), 0));
    let y = standard_residual_block(&x, &p).unwrap();
    assert_eq!(y, x);
}

#[test]
fn split_alpha_one_is_bit_identical_to_standard() {
    let x = random([2, 8, 9, 7], -3.0, 3.0, &mut rng(2));
    let split = init(BlockSpec::new(BlockKind::SplitSr, 8, 1.0), 7);
    let mut standard = split.clone();
    standard.spec.kind = BlockKind::StandardResidual;
    let a = split_sr_block(&x, &split).unwrap();
    let b = standard_residual_block(&x, &standard).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn zero_split_block_rotates_channels() {
    for (alpha, c) in [(0.25, 16), (0.5, 16), (0.125, 16), (0.3, 10)] {
        let x = channel_index_tensor(c, 3, 3);
        let p = zeroed(init(BlockSpec::new(BlockKind::SplitSr, c, alpha), 0));
        let y = split_sr_block(&x, &p).unwrap();
        let a = (alpha * c as f64 + 0.5).floor() as usize;
        for ch in 0..c {
            assert_eq!(y.at(0, ch, 1, 1), ((ch + a) % c) as f64, "alpha {alpha} ch {ch}");
        }
    }
}

#[test]
fn every_channel_is_convolved_after_inverse_alpha_blocks() {
    let c = 16;
    for alpha in [0.5, 0.25, 0.125] {
        let blocks = (1.0_f64 / alpha).ceil() as usize;
        let mut x = channel_index_tensor(c, 2, 2);
        let mut touched = BTreeSet::new();
        for i in 0..blocks {
            let p = zeroed(init(BlockSpec::new(BlockKind::SplitSr, c, alpha), i as u64));
            let block = SplitSrBlock::new(p.clone()).unwrap();
            for ch in 0..block.active_channels() {
                touched.insert(x.at(0, ch, 0, 0) as usize);
            }
            x = split_sr_block(&x, &p).unwrap();
        }
        assert_eq!(touched.len(), c, "alpha {alpha} after {blocks} blocks");

        // one block fewer leaves some channel untouched
        let mut x = channel_index_tensor(c, 2, 2);
        let mut early = BTreeSet::new();
        for i in 0..blocks - 1 {
            let p = zeroed(init(BlockSpec::new(BlockKind::SplitSr, c, alpha), i as u64));
            let a = SplitSrBlock::new(p.clone()).unwrap().active_channels();
            for ch in 0..a {
                early.insert(x.at(0, ch, 0, 0) as usize);
            }
            x = split_sr_block(&x, &p).unwrap();
        }
        assert!(early.len() < c);
    }
}

#[test]
fn zero_shuffle_and_idle_keep_idle_channels() {
    let c = 16;
    let x = channel_index_tensor(c, 3, 3);
    let idle = zeroed(init(BlockSpec::new(BlockKind::Idle, c, 0.5).with_beta(2.0), 0));
    let y = run_block(&x, &idle).unwrap();
    for ch in 8..16 {
        assert_eq!(y.at(0, ch, 0, 0), ch as f64);
    }
    for ch in 0..8 {
        assert_eq!(y.at(0, ch, 0, 0), 0.0);
    }

    // the 2-group shuffle sends channel c to (c mod 2) * 8 + c / 2
    let shuffle = zeroed(init(BlockSpec::new(BlockKind::Shuffle, c, 0.5), 0));
    let y = run_block(&x, &shuffle).unwrap();
    for c_in in 0..16 {
        let out = (c_in % 2) * 8 + c_in / 2;
        let want = if c_in < 8 { 0.0 } else { c_in as f64 };
        assert_eq!(y.at(0, out, 0, 0), want);
    }
}

#[test]
fn shuffle_active_branch_width() {
    let p = init(BlockSpec::new(BlockKind::Shuffle, 16, 0.5), 0);
    assert!(p.weights.iter().all(|w| w.c_out() == 8));
    assert_eq!(p.weights[1].groups, 8);
}

#[test]
fn shuffle_rejects_odd_channels() {
    let spec = BlockSpec::new(BlockKind::Shuffle, 15, 0.5);
    let err = BlockRegistry::<f32>::builtin()
        .get(BlockKind::Shuffle)
        .unwrap()
        .init(&spec, "b", &mut rng(0))
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn idle_expansion_width() {
    let spec = BlockSpec::new(BlockKind::Idle, 16, 0.5).with_beta(2.0);
    let block = IdleBlock::<f64>::init(&spec, "b", &mut rng(0)).unwrap();
    assert_eq!(block.expansion_width(), 16);
}

#[test]
fn ghost_map_counts() {
    let half = GhostBlock::<f64>::init(&BlockSpec::new(BlockKind::Ghost, 16, 0.5), "g", &mut rng(0)).unwrap();
    assert_eq!((half.intrinsic_maps(), half.ghost_maps()), (8, 8));
    let full = GhostBlock::<f64>::init(&BlockSpec::new(BlockKind::Ghost, 16, 1.0), "g", &mut rng(0)).unwrap();
    assert_eq!((full.intrinsic_maps(), full.ghost_maps()), (16, 0));
    assert_eq!(full.params().weights.len(), 1);
    assert_eq!(full.params().weights[0].kernel_size(), (1, 1));
}

#[test]
fn ghost_reuses_intrinsic_maps_cyclically() {
    // 4 intrinsic maps, 12 ghosts; identity primary and identity cheap op
    let c = 16;
    let mut p = zeroed(init(BlockSpec::new(BlockKind::Ghost, c, 0.25), 0));
    let primary = &mut p.weights[0];
    for o in 0..4 {
        let i = primary.kernel.index(o, o, 0, 0);
        primary.kernel.data_mut()[i] = 1.0;
    }
    let cheap = &mut p.weights[1];
    for g in 0..12 {
        let i = cheap.kernel.index(g, 0, 1, 1);
        cheap.kernel.data_mut()[i] = 1.0;
    }
    let x = channel_index_tensor(c, 3, 3);
    let y = run_block(&x, &p).unwrap();
    for ch in 0..c {
        let want = if ch < 4 { ch } else { (ch - 4) % 4 };
        assert_eq!(y.at(0, ch, 1, 1), want as f64, "channel {ch}");
    }
}

#[test]
fn registry_lookup_by_name() {
    let reg = BlockRegistry::<f32>::builtin();
    assert_eq!(reg.kinds().len(), 5);
    assert_eq!(reg.by_name("splitsr").unwrap().kind(), BlockKind::SplitSr);
    assert_eq!(reg.by_name("standard_residual").unwrap().kind(), BlockKind::StandardResidual);
    assert!(matches!(reg.by_name("dense"), Err(Error::UnknownName { .. })));
}

#[test]
fn mismatched_weights_are_rejected() {
    let mut p = init(BlockSpec::new(BlockKind::SplitSr, 16, 0.25), 0);
    p.weights[1] = ConvWeights::zeros("b.conv2", 8, 8, 3, 1);
    assert!(SplitSrBlock::new(p).is_err());
}

#[test]
fn blocks_are_deterministic() {
    let x = random([1, 16, 10, 10], -1.0, 1.0, &mut rng(3));
    for kind in BlockKind::ALL {
        let p = init(BlockSpec::new(kind, 16, 0.5), 11);
        assert_eq!(run_block(&x, &p).unwrap(), run_block(&x, &p).unwrap());
        assert_eq!(p, init(BlockSpec::new(kind, 16, 0.5), 11));
    }
}

fn block_input_gradient_ok(kind: BlockKind, alpha: f64) {
    let spec = BlockSpec::new(kind, 8, alpha).with_beta(2.0);
    let p = init(spec, 5);
    let block = BlockRegistry::<f64>::builtin().get(kind).unwrap().from_params(p).unwrap();
    let x = random([1, 8, 5, 5], -1.0, 1.0, &mut rng(6));
    let check = check_gradients(
        &[x],
        |v| block.forward(&v[0], &mut Binder::inference()),
        9,
    );
    assert!(check.within(1e-4), "{kind}: rel {} tiny {}", check.max_rel, check.max_abs_tiny);
}

#[test]
fn block_input_gradients_match_finite_differences() {
    for kind in BlockKind::ALL {
        block_input_gradient_ok(kind, 0.5);
    }
    block_input_gradient_ok(BlockKind::SplitSr, 0.25);
    block_input_gradient_ok(BlockKind::Ghost, 0.25);
}

#[test]
fn block_weight_gradients_match_finite_differences() {
    for kind in BlockKind::ALL {
        let spec = BlockSpec::new(kind, 8, 0.5).with_beta(2.0);
        // nonzero biases keep pre-activations off the ReLU kink
        let mut params = init(spec, 21);
        let mut r = rng(24);
        for w in &mut params.weights {
            w.bias = w.bias.as_ref().map(|b| b.iter().map(|_| r.random_range(-0.5..0.5)).collect());
        }
        let reg = BlockRegistry::<f64>::builtin();
        let factory = reg.get(kind).unwrap();
        let x = random([1, 8, 4, 4], -1.0, 1.0, &mut rng(22));
        let u = random([1, 8, 4, 4], -1.0, 1.0, &mut rng(23));

        let block = factory.from_params(params.clone()).unwrap();
        let mut binder = Binder::training();
        let y = block.forward(&Var::constant(x.clone()), &mut binder).unwrap();
        let grads = binder.collect(&y.backward_with(u.clone()).unwrap());

        let objective = |p: &BlockParams<f64>| -> f64 {
            let y = run_block(&x, p).unwrap();
            y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (wi, w) in params.weights.iter().enumerate() {
            let g = &grads[&w.name];
            for i in 0..w.kernel.len() {
                let mut p = params.clone();
                p.weights[wi].kernel.data_mut()[i] += h;
                let plus = objective(&p);
                p.weights[wi].kernel.data_mut()[i] -= 2.0 * h;
                let minus = objective(&p);
                let numeric = (plus - minus) / (2.0 * h);
                let a = g.kernel.data()[i];
                let scale = a.abs().max(numeric.abs());
                if scale > 1e-8 {
                    worst = worst.max((a - numeric).abs() / scale);
                }
            }
            let bias = g.bias.as_ref().unwrap();
            for i in 0..bias.len() {
                let mut p = params.clone();
                p.weights[wi].bias.as_mut().unwrap()[i] += h;
                let plus = objective(&p);
                p.weights[wi].bias.as_mut().unwrap()[i] -= 2.0 * h;
                let minus = objective(&p);
                let numeric = (plus - minus) / (2.0 * h);
                let scale = bias[i].abs().max(numeric.abs());
                if scale > 1e-8 {
                    worst = worst.max((bias[i] - numeric).abs() / scale);
                }
            }
        }
        assert!(worst < 1e-4, "{kind}: {worst}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blocks_preserve_shape(
        kind_idx in 0usize..5,
        n in 1usize..3,
        half_c in 1usize..9,
        h in 1usize..9,
        w in 1usize..9,
        alpha in prop::sample::select(vec![0.125, 0.25, 0.5, 0.75, 1.0]),
        seed in 0u64..1000,
    ) {
        let kind = BlockKind::ALL[kind_idx];
        let c = 2 * half_c;
        prop_assume!((alpha * c as f64 + 0.5).floor() >= 1.0);
        let spec = BlockSpec::new(kind, c, alpha).with_beta(1.5);
        let p = init(spec, seed);
        let x = random([n, c, h, w], -1.0, 1.0, &mut rng(seed));
        let y = run_block(&x, &p).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
    }
}
