use gerseg::glayers::{Ctx, GroupConv, Layer, Mode, SkipMode};
use gerseg::net::{equivariance_report, GroupMode, NetConfig, Network};
use gerseg::tensor::{ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RANDOM_WEIGHTS: Ctx = Ctx {
    mode: Mode::Train,
    cache: false,
};

fn image(size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 1, size, size], |_| rng.gen_range(-1.0..1.0))
}

/// Configs whose per-stage widths scale by 1/√8 without large rounding loss.
fn matched_configs() -> Vec<NetConfig> {
    let mut out = Vec::new();
    for (bw, stages) in [(4, 4), (8, 3), (8, 4), (12, 4), (16, 2), (16, 3), (16, 4)] {
        for blocks in [1, 2] {
            for skip in [SkipMode::Add, SkipMode::Concat] {
                out.push(NetConfig {
                    base_width: bw,
                    stages,
                    blocks_per_stage: blocks,
                    skip_mode: skip,
                    ..NetConfig::default()
                });
            }
        }
    }
    out
}

#[test]
fn matched_twins_have_similar_parameter_counts() {
    for cfg in matched_configs() {
        let reg = cfg.regular_twin();
        let a = Network::<f32>::build(&reg.group_twin()).unwrap().param_count();
        let b = Network::<f32>::build(&reg).unwrap().param_count();
        let ratio = a as f64 / b as f64;
        assert!((0.9..=1.1).contains(&ratio), "{cfg:?}: {a} vs {b}");
    }
}

#[test]
fn unscaled_group_net_is_much_larger() {
    let cfg = NetConfig::default();
    let a = Network::<f32>::build(&cfg).unwrap().param_count();
    let b = Network::<f32>::build(&cfg.regular_twin()).unwrap().param_count();
    let ratio = a as f64 / b as f64;
    assert!((7.0..=9.0).contains(&ratio), "{ratio}");
}

#[test]
fn lifting_conv_stores_one_canonical_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = GroupConv::<f64>::new("c", 3, 8, 1, 8, ConvSpec::same(3), true, &mut rng).unwrap();
    let n: usize = conv.params().iter().map(|p| p.value.len()).sum();
    assert_eq!(n, 8 * 3 * 9 + 8);
}

#[test]
fn param_count_matches_descriptors() {
    for cfg in matched_configs().into_iter().take(4) {
        let net = Network::<f32>::build(&cfg).unwrap();
        let summed: usize = net.descriptors().iter().map(|d| d.params).sum();
        assert_eq!(net.param_count(), summed);
    }
}

#[test]
fn random_group_network_is_equivariant_end_to_end() {
    for (seed, cfg) in [
        (0, NetConfig::default()),
        (
            1,
            NetConfig {
                base_width: 4,
                stages: 3,
                skip_mode: SkipMode::Concat,
                ..NetConfig::default()
            },
        ),
    ] {
        let mut net = Network::<f64>::build(&NetConfig { init_seed: seed, ..cfg }).unwrap();
        let x = image(32, seed);
        for row in equivariance_report(&mut net, &x, RANDOM_WEIGHTS).unwrap() {
            assert!(row.max_abs <= 1e-10, "{}: {:e}", row.element, row.max_abs);
            assert_eq!(row.mask_diff_px, 0);
        }
    }
}

#[test]
fn regular_twin_is_not_equivariant() {
    let mut net = Network::<f64>::build(&NetConfig::default().regular_twin()).unwrap();
    let rows = equivariance_report(&mut net, &image(32, 3), RANDOM_WEIGHTS).unwrap();
    assert_eq!(rows[0].max_abs, 0.0);
    let worst = rows.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    assert!(worst >= 1e-2, "{worst:e}");
}

#[test]
fn single_precision_group_network_is_equivariant_to_rounding() {
    let mut net = Network::<f32>::build(&NetConfig {
        base_width: 4,
        stages: 3,
        ..NetConfig::default()
    })
    .unwrap();
    let x: Tensor<f32> = image(32, 9).cast();
    for row in equivariance_report(&mut net, &x, RANDOM_WEIGHTS).unwrap() {
        assert!(row.max_rel <= 1e-4, "{}: {:e}", row.element, row.max_rel);
    }
}

/// One batch-statistics pass so eval mode has running statistics.
fn warm(net: &mut Network<f64>, size: usize) {
    net.forward(&image(size, 99), RANDOM_WEIGHTS).unwrap();
}

#[test]
fn batch_items_are_independent_in_eval_mode() {
    let cfg = NetConfig {
        base_width: 4,
        stages: 3,
        blocks_per_stage: 1,
        ..NetConfig::default()
    };
    for mode in [GroupMode::Group, GroupMode::Regular] {
        let mut net = Network::<f64>::build(&NetConfig {
            group_mode: mode,
            ..cfg.clone()
        })
        .unwrap();
        warm(&mut net, 16);
        let (a, b) = (image(16, 1), image(16, 2));
        let both = Tensor::concat(&[&a, &b], 0).unwrap();
        let y = net.forward(&both, Ctx::EVAL).unwrap();
        let ya = net.forward(&a, Ctx::EVAL).unwrap();
        let yb = net.forward(&b, Ctx::EVAL).unwrap();
        assert_eq!(y.index_first(0).unwrap(), ya.index_first(0).unwrap());
        assert_eq!(y.index_first(1).unwrap(), yb.index_first(0).unwrap());
    }
}

#[test]
fn zero_weights_give_spatially_constant_logits() {
    let mut net = Network::<f64>::build(&NetConfig {
        base_width: 4,
        stages: 2,
        blocks_per_stage: 1,
        ..NetConfig::default()
    })
    .unwrap();
    net.scale_params(0.0);
    warm(&mut net, 8);
    let y = net.forward(&image(8, 4), Ctx::EVAL).unwrap();
    for c in 0..y.dim(1) {
        let plane = &y.data()[c * 64..(c + 1) * 64];
        assert!(plane.iter().all(|v| *v == plane[0]));
    }
}

#[test]
fn inputs_must_divide_by_the_stride_product() {
    let mut net = Network::<f64>::build(&NetConfig {
        base_width: 4,
        stages: 3,
        blocks_per_stage: 1,
        ..NetConfig::default()
    })
    .unwrap();
    warm(&mut net, 8);
    assert!(net.forward(&image(10, 0), Ctx::EVAL).is_err());
    assert!(net.forward(&image(12, 0), Ctx::EVAL).is_ok());
}
