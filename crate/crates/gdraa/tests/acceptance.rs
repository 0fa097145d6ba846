//! Acceptance gate: one test per shipping criterion, each printing a single
//! PASS line (cargo prints the FAIL line if an assertion trips). Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use gdraa::buffers::{partition, ElementWidth};
use gdraa::collectives::gdraa::GdraaWorker;
use gdraa::collectives::{Collective, CollectiveKind};
use gdraa::harness::metrics::{audit_speedups, compute_pcr, speedup};
use gdraa::harness::problem::SyntheticProblem;
use gdraa::harness::sgd::{LrPolicy, SsgdConfig};
use gdraa::harness::train::{
    gen_gradient, loopback_allreduce_session, spawn_local_cluster, train_distributed,
    train_serial, TrainSetup,
};
use gdraa::jobserver::{
    iter_done_message, worker_ready_message, JobServer, JobSpec, StagingTier,
};
use gdraa::sim::closed_form::{
    gdraa_iteration_time, ps_iteration_time, ring_uniform_iteration_time,
};
use gdraa::sim::engine::simulate;
use gdraa::sim::{ClusterSpec, ComputeModel};
use gdraa::transport::loopback::LoopbackFabric;
use gdraa::transport::{ControlKind, ControlPlane, NodeId};

const WORKER_GRID: [usize; 7] = [1, 2, 3, 4, 8, 16, 32];
const ELEMENT_GRID: [usize; 4] = [1, 7, 1000, 1_000_000];

#[test]
fn c01_every_collective_matches_the_elementwise_mean_oracle() {
    let started = Instant::now();
    let seed = 11;
    let mut worst: f64 = 0.0;
    for kind in CollectiveKind::ALL {
        for n in WORKER_GRID {
            for l in ELEMENT_GRID {
                let session =
                    loopback_allreduce_session(kind, n, l, ElementWidth::Eight, 1, seed)
                        .unwrap_or_else(|e| panic!("{kind} n={n} l={l}: {e}"));
                let oracle = common::mean_oracle(seed, n, 1, l, ElementWidth::Eight);
                let err = common::max_rel_err(&session[0].result, &oracle);
                assert!(
                    err <= 1e-6,
                    "{kind} n={n} l={l}: max rel err {err:.3e} exceeds 1e-6"
                );
                worst = worst.max(err);
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(120),
        "grid took {elapsed:?}, budget is two minutes"
    );
    println!(
        "ACCEPTANCE c01 PASS — 3 collectives × {} cluster sizes × {} gradient lengths all \
         within 1e-6 of the mean oracle (worst {worst:.2e}, {elapsed:.2?})",
        WORKER_GRID.len(),
        ELEMENT_GRID.len()
    );
}

#[test]
fn c02_per_phase_payload_bytes_match_the_partition_formula() {
    let width = ElementWidth::Four;
    let w = width.bytes() as u64;
    for n in WORKER_GRID {
        for l in ELEMENT_GRID {
            let session =
                loopback_allreduce_session(CollectiveKind::Gdraa, n, l, width, 1, 5).unwrap();
            let blocks = partition(l, n).unwrap();
            let lead = blocks[0].len as u64; // ceil(l / n)
            for (rank, stats) in session[0].stats.iter().enumerate() {
                let own = blocks[rank].len as u64;
                let rs = &stats.reduce_scatter;
                let bc = &stats.broadcast;
                assert_eq!(rs.bytes_sent, w * (l as u64 - own), "rs sent n={n} l={l} rank={rank}");
                assert_eq!(rs.bytes_received, w * (n as u64 - 1) * own, "rs recv");
                assert_eq!(bc.bytes_sent, w * (n as u64 - 1) * own, "bc sent");
                assert_eq!(bc.bytes_received, w * (l as u64 - own), "bc recv");
            }
            // The lead rank always pays exactly width × (L − ceil(L/N)) to
            // scatter, and when the blocks divide evenly every rank pays
            // that same width·L·(1 − 1/N) in both phases and directions.
            let lead_stats = &session[0].stats[0];
            assert_eq!(lead_stats.reduce_scatter.bytes_sent, w * (l as u64 - lead));
            if l % n == 0 {
                let uniform = w * (l as u64) * (n as u64 - 1) / n as u64;
                for stats in &session[0].stats {
                    assert_eq!(stats.reduce_scatter.bytes_sent, uniform);
                    assert_eq!(stats.reduce_scatter.bytes_received, uniform);
                    assert_eq!(stats.broadcast.bytes_sent, uniform);
                    assert_eq!(stats.broadcast.bytes_received, uniform);
                }
            }
        }
    }
    println!(
        "ACCEPTANCE c02 PASS — per-phase payload bytes equal width×(L − ceil(L/N)) at the \
         lead rank and the partition-derived counts everywhere, exactly"
    );
}

#[test]
fn c03_aggregation_work_matches_the_block_length_formula() {
    let width = ElementWidth::Four;
    for n in WORKER_GRID {
        for l in ELEMENT_GRID {
            let session =
                loopback_allreduce_session(CollectiveKind::Gdraa, n, l, width, 1, 6).unwrap();
            let blocks = partition(l, n).unwrap();
            for (rank, stats) in session[0].stats.iter().enumerate() {
                let own = blocks[rank].len as u64;
                assert_eq!(stats.agg_adds, (n as u64 - 1) * own, "adds n={n} l={l} rank={rank}");
                assert_eq!(stats.agg_muls, own, "muls n={n} l={l} rank={rank}");
                assert_eq!(stats.agg_adds + stats.agg_muls, n as u64 * own);
            }
            // Lead rank: adds + muls = N·ceil(L/N); uniform case: = L.
            let lead = &session[0].stats[0];
            assert_eq!(lead.agg_adds + lead.agg_muls, (n * blocks[0].len) as u64);
            if l % n == 0 {
                assert_eq!(lead.agg_adds + lead.agg_muls, l as u64);
            }
        }
    }
    // The worked example: 4 workers, 1024 elements → 768 adds + 256 muls.
    let session =
        loopback_allreduce_session(CollectiveKind::Gdraa, 4, 1024, ElementWidth::Four, 1, 6)
            .unwrap();
    assert_eq!(session[0].stats[0].agg_adds, 768);
    assert_eq!(session[0].stats[0].agg_muls, 256);
    println!(
        "ACCEPTANCE c03 PASS — per-rank aggregation counters satisfy adds + muls = N·block \
         (N·ceil(L/N) at the lead rank; 768 + 256 = 1024 at N=4, L=1024)"
    );
}

#[test]
fn c04_exactly_two_sync_waits_per_worker_per_iteration() {
    let iterations = 100;
    for n in [2usize, 3, 4, 8, 16, 32] {
        let session = loopback_allreduce_session(
            CollectiveKind::Gdraa,
            n,
            1000,
            ElementWidth::Eight,
            iterations,
            9,
        )
        .unwrap();
        for row in &session {
            for (rank, stats) in row.stats.iter().enumerate() {
                assert_eq!(
                    stats.sync_waits, 2,
                    "n={n} iteration={} rank={rank}: {} waits",
                    row.iteration, stats.sync_waits
                );
            }
        }
    }
    println!(
        "ACCEPTANCE c04 PASS — sync_waits == 2 for every worker in every one of {iterations} \
         iterations at N ∈ {{2,3,4,8,16,32}}"
    );
}

#[test]
fn c05_job_server_moves_no_gradient_data_during_an_orchestrated_run() {
    let workers = 2usize;
    let elements = 64usize;
    let width = ElementWidth::Eight;
    let fabric = LoopbackFabric::new(workers);
    let spec = JobSpec {
        name: "zero-data-audit".into(),
        dataset_bytes: 1_000_000,
        samples: 40,
        epochs: 1,
        workers,
        batch_per_worker: 2,
        elements,
        width_bytes: width.bytes(),
    };

    let mut handles = Vec::new();
    for rank in 0..workers as u32 {
        let blocks = partition(elements, workers).unwrap();
        let data = fabric.data_endpoint(rank, blocks, width);
        let mut control = fabric.control_endpoint(NodeId::Worker(rank));
        handles.push(std::thread::spawn(move || {
            let mut collective = GdraaWorker::new(data, elements, width).unwrap();
            loop {
                let msg = control
                    .recv_control(Some(Duration::from_secs(10)))
                    .unwrap()
                    .expect("job server went quiet");
                match msg.kind {
                    ControlKind::StageData => control
                        .send_control(NodeId::JobServer, worker_ready_message(rank))
                        .unwrap(),
                    ControlKind::IterStart => {
                        let mut g = gen_gradient(3, rank, msg.iteration, elements);
                        let stats = collective.allreduce(msg.iteration, &mut g).unwrap();
                        control
                            .send_control(NodeId::JobServer, iter_done_message(rank, &stats))
                            .unwrap();
                    }
                    ControlKind::Shutdown => return,
                    _ => {}
                }
            }
        }));
    }

    let control = fabric.control_endpoint(NodeId::JobServer);
    let mut server = JobServer::new(control, workers);
    let report = server.run(&spec, &StagingTier::burst_buffer()).unwrap();
    for h in handles {
        h.join().unwrap();
    }

    assert_eq!(report.iterations, 10);
    assert_eq!(report.records.len(), 20, "all IterDone reports landed");
    let to_server = fabric.data_bytes_enqueued_to(NodeId::JobServer);
    assert_eq!(to_server, 0, "gradient bytes reached the job server");
    let to_workers: u64 = (0..workers as u32)
        .map(|r| fabric.data_bytes_enqueued_to(NodeId::Worker(r)))
        .sum();
    assert!(to_workers > 0, "gradients should have moved between workers");
    println!(
        "ACCEPTANCE c05 PASS — 10-iteration orchestrated run: {to_workers} gradient bytes \
         moved worker-to-worker, 0 bytes through the job server, 20 control reports collected"
    );
}

#[test]
fn c06_price_performance_of_the_reference_run() {
    let pcr = compute_pcr(888.0, 900);
    // 1/(888·900) = 1.2512513e-6, which prints as 0.00000125.
    assert!((pcr - 1.2512e-6).abs() < 5e-10, "pcr = {pcr}");
    assert_eq!(format!("{pcr:.8}"), "0.00000125");
    println!("ACCEPTANCE c06 PASS — compute_pcr(888, 900) = {pcr:.4e} → 0.00000125");
}

#[test]
fn c07_scaling_table_reproduced_and_inconsistent_rows_flagged() {
    // Measured minutes per cluster size; the baseline single worker takes
    // 4841. Wall-clock times themselves are a published measurement on
    // hardware this repository does not have, so the check recomputes the
    // ratios rather than the runs.
    let base = 4841.0;
    let rows = [
        (2, 3039.0, 1.59),
        (4, 1644.0, 2.84),
        (8, 850.0, 5.70),
        (16, 430.0, 11.26),
        (32, 333.0, 14.56),
    ];
    for &(n, t, claimed) in &rows {
        let s = speedup(base, t);
        if n == 2 || n == 8 || n == 16 {
            assert!(
                (s - claimed).abs() < 0.005,
                "n={n}: recomputed {s:.4} vs published {claimed}"
            );
        }
    }
    let audit_rows: Vec<(f64, f64)> = rows.iter().map(|&(_, t, c)| (t, c)).collect();
    let flagged = audit_speedups(base, &audit_rows, 0.005);
    let flagged_claims: Vec<f64> = flagged.iter().map(|m| m.claimed).collect();
    assert_eq!(flagged_claims, vec![2.84, 14.56], "flagged rows");
    assert!((flagged[0].recomputed - 2.94).abs() < 0.005);
    assert!((flagged[1].recomputed - 14.54).abs() < 0.005);
    println!(
        "ACCEPTANCE c07 PASS — speedups 1.59 / 5.70 / 11.26 reproduced at N = 2 / 8 / 16; \
         the 2.84 and 14.56 rows are flagged as inconsistent with their own times \
         (they recompute to 2.94 and 14.54)"
    );
}

#[test]
fn c08_cost_model_contrast_between_direct_exchange_server_and_ring() {
    let elements = 250_000_000usize; // × 4-byte width = 1 GB gradient
    let width = ElementWidth::Four;
    let free_latency = ClusterSpec {
        alpha_s: 0.0,
        beta_bytes_per_s: 1e9,
        switch_bytes_per_s: None,
        agg_flops_per_s: None,
        compute: ComputeModel::FixedSeconds(0.0),
        per_worker_batch: 1,
    };

    // Bandwidth story: the direct exchange never exceeds two gradient
    // serializations while the server's inbound link costs 2N of them.
    for n in 1..=32usize {
        let direct = simulate(CollectiveKind::Gdraa, &free_latency, n, elements, width).unwrap();
        assert!(
            direct.iteration_time_s <= 2.0 + 1e-9,
            "n={n}: direct {:.9}",
            direct.iteration_time_s
        );
        let closed = gdraa_iteration_time(&free_latency, n, elements, width).unwrap();
        assert!((direct.iteration_time_s - closed).abs() <= 1e-9);

        let server = simulate(CollectiveKind::ParamServer, &free_latency, n, elements, width)
            .unwrap();
        assert!(
            server.iteration_time_s >= 2.0 * n as f64 - 1e-9,
            "n={n}: server {:.9}",
            server.iteration_time_s
        );
        assert!(
            (server.iteration_time_s - ps_iteration_time(&free_latency, n, elements, width))
                .abs()
                <= 1e-9
        );
    }

    // Latency story: with bandwidth effectively infinite, the ring still
    // pays a latency per hop — 2(N−1)α — while the direct exchange pays 2α
    // no matter how wide the cluster is.
    let alpha = 0.7e-6;
    let latency_bound = ClusterSpec {
        alpha_s: alpha,
        beta_bytes_per_s: 1e18,
        ..free_latency.clone()
    };
    for n in [2usize, 8, 32] {
        let ring = simulate(CollectiveKind::Ring, &latency_bound, n, elements, width).unwrap();
        let direct =
            simulate(CollectiveKind::Gdraa, &latency_bound, n, elements, width).unwrap();
        assert!(
            (ring.iteration_time_s - 2.0 * (n as f64 - 1.0) * alpha).abs() < 1e-8,
            "n={n}: ring {:.3e}",
            ring.iteration_time_s
        );
        assert!(
            (direct.iteration_time_s - 2.0 * alpha).abs() < 1e-8,
            "n={n}: direct {:.3e}",
            direct.iteration_time_s
        );
        let ring_closed = ring_uniform_iteration_time(&latency_bound, n, elements, width);
        assert!((ring.iteration_time_s - ring_closed).abs() <= 1e-9);
        let direct_closed = gdraa_iteration_time(&latency_bound, n, elements, width).unwrap();
        assert!((direct.iteration_time_s - direct_closed).abs() <= 1e-9);
    }
    println!(
        "ACCEPTANCE c08 PASS — 1 GB gradient at β = 1 GB/s: direct ≤ 2.0 s for all N ≤ 32 \
         while the server link costs 2N s; ring latency grows as 2(N−1)α against the \
         direct exchange's 2α; engine and closed forms agree to 1e-9 s"
    );
}

#[test]
fn c09_distributed_sgd_matches_serial_and_converges_to_the_optimum() {
    // Trajectory: 4 workers × batch 8 against a serial batch-32 run for 100
    // iterations.
    let problem = SyntheticProblem::least_squares(31, 320, 16, 0.001, 0.1);
    let opt = SsgdConfig {
        lr0: 0.1,
        momentum: 0.9,
        weight_decay: 0.001,
        policy: LrPolicy::Constant,
    };
    let setup = TrainSetup::new(CollectiveKind::Gdraa, 4, 8, 10);
    let dist = train_distributed(&problem, opt, &setup).unwrap();
    let serial = train_serial(&problem, opt, 100, 32);
    assert_eq!(dist.losses.len(), 100);
    for (i, (a, b)) in dist.losses.iter().zip(&serial.losses).enumerate() {
        assert!(
            (a - b).abs() <= 1e-5 * b.abs().max(1.0),
            "iteration {}: {a} vs {b}",
            i + 1
        );
    }
    let mut worst: f64 = 0.0;
    for (a, b) in dist.final_weights.iter().zip(&serial.final_weights) {
        worst = worst.max((a - b).abs());
        assert!((a - b).abs() <= 1e-5, "final weights {a} vs {b}");
    }

    // Convergence: full-batch gradient descent on a well-conditioned ridge
    // problem must land on the closed-form optimum.
    let convex = SyntheticProblem::least_squares(32, 32, 8, 0.5, 0.05);
    let plain = SsgdConfig {
        lr0: 0.2,
        momentum: 0.0,
        weight_decay: 0.0,
        policy: LrPolicy::Constant,
    };
    let conv_setup = TrainSetup::new(CollectiveKind::Gdraa, 4, 8, 100);
    let run = train_distributed(&convex, plain, &conv_setup).unwrap();
    let all: Vec<usize> = (0..convex.samples()).collect();
    let optimum = convex.closed_form_optimum();
    let gap = convex.loss(&run.final_weights, &all) - convex.loss(&optimum, &all);
    assert!(gap.abs() <= 1e-6, "final loss gap {gap:.3e}");
    println!(
        "ACCEPTANCE c09 PASS — distributed trajectory within 1e-5 of serial over 100 \
         iterations (worst weight gap {worst:.2e}); final loss within {gap:.1e} of the \
         closed-form optimum"
    );
}

#[test]
fn c10_socket_processes_reproduce_loopback_bit_for_bit() {
    let (workers, elements, iterations, seed) = (4usize, 1000usize, 20u64, 77u64);
    let exe = Path::new(env!("CARGO_BIN_EXE_gdraa"));
    let socket = spawn_local_cluster(
        exe,
        CollectiveKind::Gdraa,
        workers,
        elements,
        ElementWidth::Eight,
        iterations,
        seed,
    )
    .unwrap();
    let loopback = loopback_allreduce_session(
        CollectiveKind::Gdraa,
        workers,
        elements,
        ElementWidth::Eight,
        iterations,
        seed,
    )
    .unwrap();

    for row in &loopback {
        let i = (row.iteration - 1) as usize;
        for (rank, digests) in socket.iter().enumerate() {
            assert_eq!(digests[i].0, row.iteration);
            assert_eq!(
                digests[i].1, row.digest,
                "iteration {} rank {rank}: socket differs from loopback",
                row.iteration
            );
        }
    }
    println!(
        "ACCEPTANCE c10 PASS — {workers} OS processes over TCP produced bitwise-identical \
         averaged gradients to the in-process run for all {iterations} iterations"
    );
}
