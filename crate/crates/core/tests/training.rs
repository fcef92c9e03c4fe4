use std::fs;

use gerseg::glayers::Ctx;
use gerseg::net::{equivariance_report, GroupMode, NetConfig, Network, INV_SQRT8};
use gerseg::synthdata::{generate, Sample, SynthConfig};
use gerseg::train::{fit, mean_dice, normalize, FitOptions, TrainConfig};
use gerseg::Error;

fn corpus(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    generate(&SynthConfig {
        n_images: n,
        image_size: size,
        radius_min: 3.0,
        radius_max: size as f64 / 4.0,
        data_seed: seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_net(mode: GroupMode) -> NetConfig {
    NetConfig {
        base_width: 4,
        stages: 3,
        blocks_per_stage: 1,
        group_mode: mode,
        width_scale: if mode == GroupMode::Group { INV_SQRT8 } else { 1.0 },
        ..NetConfig::default()
    }
}

fn tiny_net() -> NetConfig {
    NetConfig {
        base_width: 2,
        stages: 2,
        blocks_per_stage: 1,
        ..NetConfig::default()
    }
}

#[test]
fn one_image_overfits_within_200_steps() {
    let data = corpus(1, 32, 5);
    for mode in [GroupMode::Group, GroupMode::Regular] {
        let mut net: Network<f32> = Network::build(&small_net(mode)).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            lr0: 3e-3,
            max_epochs: 200,
            augment: false,
            early_stop_patience: 1000,
            ..TrainConfig::default()
        };
        let r = fit(&mut net, &data, &data, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(r.steps, 200);
        let dice = mean_dice(&mut net, &data, 1).unwrap();
        assert!(dice >= 0.99, "{mode}: dice {dice}");

        let first = &r.step_losses[..10];
        assert!(first.iter().all(|l| *l >= 0.0));
        assert!(first.windows(2).all(|w| w[1] < w[0]), "{mode}: {first:?}");
    }
}

#[test]
fn fixed_seed_reproduces_the_loss_curve() {
    let data = corpus(6, 32, 1);
    let cfg = TrainConfig {
        batch_size: 2,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
        fit(&mut net, &data[..4], &data[4..], &cfg, &FitOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.step_losses), bits(&b.step_losses));
    assert_eq!(a.step_losses.len(), 4);
}

#[test]
fn interrupted_run_resumes_bit_identically() {
    let data = corpus(6, 32, 2);
    let cfg = TrainConfig {
        batch_size: 2,
        max_epochs: 4,
        lr0: 1e-3,
        ..TrainConfig::default()
    };
    let whole = tempfile::tempdir().unwrap();
    let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
    let full = fit(
        &mut net,
        &data[..4],
        &data[4..],
        &cfg,
        &FitOptions {
            out_dir: Some(whole.path()),
            ..FitOptions::default()
        },
    )
    .unwrap();

    let parts = tempfile::tempdir().unwrap();
    let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
    let opts = FitOptions {
        out_dir: Some(parts.path()),
        stop_after_epochs: Some(2),
        ..FitOptions::default()
    };
    let head = fit(&mut net, &data[..4], &data[4..], &cfg, &opts).unwrap();
    assert_eq!(head.log.len(), 2);
    // a fresh process: new network, state only from disk
    let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
    let opts = FitOptions {
        out_dir: Some(parts.path()),
        resume: true,
        ..FitOptions::default()
    };
    let tail = fit(&mut net, &data[..4], &data[4..], &cfg, &opts).unwrap();
    assert_eq!(tail.log.len(), 4);
    assert_eq!(tail.steps, full.steps);
    for f in ["train_log.csv", "last.ckpt", "best.ckpt"] {
        let a = fs::read(whole.path().join(f)).unwrap();
        let b = fs::read(parts.path().join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn zero_patience_stops_at_first_flat_epoch() {
    let data = corpus(4, 32, 3);
    let cfg = TrainConfig {
        batch_size: 2,
        max_epochs: 10,
        early_stop_patience: 0,
        lr0: 1e-12,
        ..TrainConfig::default()
    };
    let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
    let r = fit(&mut net, &data[..2], &data[2..], &cfg, &FitOptions::default()).unwrap();
    // the first epoch always sets the best; an lr this small cannot improve on it
    assert!(r.stopped_early);
    assert_eq!(r.log.len(), 2);
    assert_eq!(r.best_epoch, 0);
}

#[test]
fn plateau_halves_the_learning_rate() {
    let data = corpus(4, 32, 3);
    let cfg = TrainConfig {
        batch_size: 2,
        max_epochs: 6,
        lr0: 1e-12,
        lr_plateau: 2,
        ..TrainConfig::default()
    };
    let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
    let r = fit(&mut net, &data[..2], &data[2..], &cfg, &FitOptions::default()).unwrap();
    let lrs: Vec<f64> = r.log.iter().map(|l| l.lr).collect();
    assert_eq!(lrs, vec![1e-12, 1e-12, 1e-12, 5e-13, 5e-13, 2.5e-13]);
}

#[test]
fn divergence_aborts_with_a_dump() {
    let data = corpus(4, 32, 4);
    let cfg = TrainConfig {
        batch_size: 2,
        max_epochs: 50,
        lr0: 1e30,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
    let opts = FitOptions {
        out_dir: Some(dir.path()),
        ..FitOptions::default()
    };
    let err = fit(&mut net, &data[..2], &data[2..], &cfg, &opts).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
    let dump = fs::read_to_string(dir.path().join("diverged.txt")).unwrap();
    for needle in ["epoch", "lr", "gradient norms", "stem.conv.weight"] {
        assert!(dump.contains(needle), "{dump}");
    }
}

#[test]
fn empty_splits_are_rejected() {
    let data = corpus(2, 32, 0);
    let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
    let cfg = TrainConfig::default();
    let none: &[Sample] = &[];
    assert!(matches!(
        fit(&mut net, none, &data, &cfg, &FitOptions::default()),
        Err(Error::EmptyDataset(_))
    ));
    assert!(matches!(
        fit(&mut net, &data, none, &cfg, &FitOptions::default()),
        Err(Error::EmptyDataset(_))
    ));
}

#[test]
fn train_subset_uses_a_fraction_of_the_split() {
    let data = corpus(10, 32, 6);
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 1,
        train_subset: 0.25,
        ..TrainConfig::default()
    };
    let mut net: Network<f32> = Network::build(&tiny_net()).unwrap();
    let r = fit(&mut net, &data[..8], &data[8..], &cfg, &FitOptions::default()).unwrap();
    assert_eq!(r.steps, 2);
}

#[test]
fn unaugmented_group_training_stays_rotation_consistent() {
    let data = corpus(6, 32, 7);
    let cfg = TrainConfig {
        batch_size: 2,
        max_epochs: 3,
        lr0: 3e-3,
        augment: false,
        ..TrainConfig::default()
    };
    let mut net: Network<f32> = Network::build(&small_net(GroupMode::Group)).unwrap();
    fit(&mut net, &data[..4], &data[4..], &cfg, &FitOptions::default()).unwrap();
    let x = normalize(&data[5].image).reshape(&[1, 1, 32, 32]).unwrap();
    for row in equivariance_report(&mut net, &x, Ctx::EVAL).unwrap() {
        assert!(row.max_rel <= 1e-4, "{}: {:e}", row.element, row.max_rel);
        if row.mask_diff_px > 0 {
            assert!(row.min_disagree_margin < 10.0 * row.max_abs, "{}", row.element);
        }
    }
}
