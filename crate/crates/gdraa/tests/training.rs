//! End-to-end training equivalences: a cluster sharding each batch and
//! averaging gradients must walk the same trajectory as one process on the
//! full batch, for every reduction strategy, both problem kinds, and every
//! learning-rate schedule.

use gdraa::collectives::CollectiveKind;
use gdraa::harness::problem::SyntheticProblem;
use gdraa::harness::sgd::{LrPolicy, SsgdConfig};
use gdraa::harness::train::{shard_indices, train_distributed, train_serial, TrainSetup};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

/// The algebraic foundation: with equal shard sizes, the mean of per-rank
/// shard gradients equals the gradient over the whole global window (the
/// ridge term enters each side exactly once).
#[test]
fn mean_of_shard_gradients_is_the_full_batch_gradient() {
    let problem = SyntheticProblem::least_squares(11, 96, 12, 0.01, 0.2);
    let workers = 4usize;
    let batch = 6usize;
    let w: Vec<f64> = (0..12).map(|i| (i as f64 - 6.0) * 0.05).collect();

    for nu in [1u64, 2, 5] {
        let mut mean = vec![0.0; 12];
        let mut shard = vec![0.0; 12];
        for rank in 0..workers as u32 {
            let indices = shard_indices(nu, rank, workers, batch);
            assert_eq!(indices.len(), batch);
            problem.gradient(&w, &indices, &mut shard);
            for (m, g) in mean.iter_mut().zip(&shard) {
                *m += g / workers as f64;
            }
        }

        let global = shard_indices(nu, 0, 1, workers * batch);
        let mut full = vec![0.0; 12];
        problem.gradient(&w, &global, &mut full);

        assert!(
            close(&mean, &full, 1e-7),
            "iteration {nu}: shard mean and full-batch gradient disagree"
        );
    }
}

/// Every reduction strategy yields the serial trajectory. The two
/// ascending-order strategies aggregate identically, so they agree bitwise
/// with each other; the ring reorders additions and lands within float noise.
#[test]
fn every_strategy_reproduces_the_serial_trajectory() {
    let problem = SyntheticProblem::least_squares(23, 192, 12, 0.001, 0.1);
    let cfg = SsgdConfig {
        lr0: 0.1,
        momentum: 0.9,
        weight_decay: 0.001,
        policy: LrPolicy::Constant,
    };
    let workers = 3usize;
    let batch = 8usize;
    let epochs = 4u32; // 192 / 24 = 8 iterations per epoch, 32 total
    let serial = train_serial(&problem, cfg, 32, workers * batch);

    let mut digests_by_kind = Vec::new();
    for kind in CollectiveKind::ALL {
        let setup = TrainSetup::new(kind, workers, batch, epochs);
        let out = train_distributed(&problem, cfg, &setup).unwrap();

        assert_eq!(out.losses.len(), 32, "{}", kind.as_str());
        assert_eq!(out.learning_rates, serial.learning_rates);
        assert!(
            close(&out.losses, &serial.losses, 1e-9),
            "{} losses diverged from serial",
            kind.as_str()
        );
        assert!(
            close(&out.final_weights, &serial.final_weights, 1e-9),
            "{} final weights diverged from serial",
            kind.as_str()
        );
        digests_by_kind.push((kind, out.aggregate_digests));
    }

    // Direct exchange vs central server: same sums, same bits, every step.
    let gdraa = &digests_by_kind[0].1;
    let ps = digests_by_kind
        .iter()
        .find(|(k, _)| *k == CollectiveKind::ParamServer)
        .map(|(_, d)| d)
        .unwrap();
    assert_eq!(gdraa, ps);
}

/// One worker, full-width wire: the distributed machinery must add zero
/// arithmetic — losses and weights match the serial run to the last bit.
#[test]
fn single_worker_cluster_is_bitwise_serial() {
    let problem = SyntheticProblem::least_squares(5, 64, 10, 0.01, 0.3);
    let cfg = SsgdConfig::default();
    let setup = TrainSetup::new(CollectiveKind::Gdraa, 1, 8, 2); // 16 iterations
    let dist = train_distributed(&problem, cfg, &setup).unwrap();
    let serial = train_serial(&problem, cfg, 16, 8);

    assert_eq!(dist.losses, serial.losses);
    assert_eq!(dist.final_weights, serial.final_weights);
    assert_eq!(dist.final_digests[0], serial.final_digests[0]);
}

/// The classification path end to end: a logistic problem trained across a
/// cluster matches its serial twin and actually learns the labels.
#[test]
fn logistic_training_matches_serial_and_converges() {
    let problem = SyntheticProblem::logistic(31, 128, 8, 0.001);
    let cfg = SsgdConfig {
        lr0: 0.5,
        momentum: 0.9,
        weight_decay: 0.0,
        policy: LrPolicy::Constant,
    };
    let setup = TrainSetup::new(CollectiveKind::Gdraa, 2, 16, 5); // 4 per epoch, 20 iterations
    let dist = train_distributed(&problem, cfg, &setup).unwrap();
    let serial = train_serial(&problem, cfg, 20, 32);

    assert!(close(&dist.losses, &serial.losses, 1e-9));
    assert!(close(&dist.final_weights, &serial.final_weights, 1e-9));

    let first = dist.losses.first().copied().unwrap();
    let last = dist.losses.last().copied().unwrap();
    assert!(
        last < 0.5 * first,
        "loss barely moved: {first:.6} -> {last:.6}"
    );
}

/// Schedules replicate too: under polynomial decay every worker applies the
/// same rate at every step as the serial reference, down to the zero tail.
#[test]
fn poly_decay_is_replicated_across_the_cluster() {
    let problem = SyntheticProblem::least_squares(17, 96, 6, 0.01, 0.1);
    let cfg = SsgdConfig {
        lr0: 0.2,
        momentum: 0.0,
        weight_decay: 0.0,
        policy: LrPolicy::Poly {
            power: 2.0,
            max_updates: 20,
        },
    };
    let setup = TrainSetup::new(CollectiveKind::Ring, 2, 4, 2); // 12 per epoch, 24 iterations
    let dist = train_distributed(&problem, cfg, &setup).unwrap();
    let serial = train_serial(&problem, cfg, 24, 8);

    assert_eq!(dist.learning_rates, serial.learning_rates);
    assert_eq!(dist.learning_rates.len(), 24);
    // Decay reaches zero at update 20 and stays there.
    assert_eq!(dist.learning_rates[0], 0.2);
    assert!(dist.learning_rates[19] > 0.0);
    assert_eq!(&dist.learning_rates[20..], &[0.0, 0.0, 0.0, 0.0]);
    assert!(close(&dist.final_weights, &serial.final_weights, 1e-9));
}
