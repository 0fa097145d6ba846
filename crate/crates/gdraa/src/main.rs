//! Command-line front end: correctness checks, cost-model simulations,
//! multi-process runs over real sockets, synthetic training, and small
//! metric calculations.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gdraa::buffers::ElementWidth;
use gdraa::collectives::{reduce_mean_ascending, CollectiveKind};
use gdraa::harness::metrics::{compute_pcr, speedup};
use gdraa::harness::problem::SyntheticProblem;
use gdraa::harness::sgd::{LrPolicy, SsgdConfig};
use gdraa::harness::train::{
    gen_gradient, loopback_allreduce_session, run_socket_session, spawn_local_cluster,
    train_distributed, SocketSessionArgs, TrainSetup,
};
use gdraa::sim::scaling::{scaling_run, write_csv, ScalingConfig, ScalingMode};
use gdraa::sim::{engine, ClusterSpec, ComputeModel};

#[derive(Parser)]
#[command(
    name = "gdraa",
    version,
    about = "Gradient all-reduce over one-sided writes: checkers, simulators, and a training harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run in-process all-reduces and verify every rank against a serial
    /// reference reduction.
    AllreduceCheck(AllreduceCheckArgs),
    /// Price one iteration (or sweep cluster sizes) under the latency and
    /// bandwidth cost model.
    Simulate(SimulateArgs),
    /// Spawn one OS process per endpoint on localhost sockets and check
    /// they reproduce the in-process results bit for bit.
    RunLocal(RunLocalArgs),
    /// Train a synthetic model across an in-process cluster under the job
    /// server.
    Train(TrainArgs),
    /// Price/performance of a measured run.
    Pcr(PcrArgs),
    /// One endpoint of a socket-mesh session (spawned by run-local).
    #[command(hide = true)]
    SocketWorker(SocketWorkerArgs),
}

fn parse_collective(s: &str) -> Result<CollectiveKind, String> {
    s.parse()
}

fn parse_width(bytes: usize) -> Result<ElementWidth, String> {
    ElementWidth::from_bytes(bytes).map_err(|e| e.to_string())
}

#[derive(Args)]
struct AllreduceCheckArgs {
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 1024)]
    elements: usize,
    /// Wire width per element: 4 or 8 bytes.
    #[arg(long, default_value_t = 8)]
    width_bytes: usize,
    #[arg(long, default_value_t = 3)]
    iterations: u64,
    #[arg(long, default_value = "gdraa", value_parser = parse_collective)]
    collective: CollectiveKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 1_000_000)]
    elements: usize,
    #[arg(long, default_value_t = 4)]
    width_bytes: usize,
    #[arg(long, default_value = "gdraa", value_parser = parse_collective)]
    collective: CollectiveKind,
    /// Per-message latency in seconds.
    #[arg(long, default_value_t = gdraa::sim::DEFAULT_ALPHA_S)]
    alpha: f64,
    /// Per-link bandwidth in bytes per second.
    #[arg(long, default_value_t = gdraa::sim::DEFAULT_BETA_BYTES_PER_S)]
    beta: f64,
    /// Shared-switch capacity in bytes per second (unset: non-blocking).
    #[arg(long)]
    switch: Option<f64>,
    /// Aggregation rate in flops per second (unset: aggregation is free).
    #[arg(long)]
    agg_flops: Option<f64>,
    /// Fixed compute time per iteration in seconds.
    #[arg(long, default_value_t = 0.0)]
    compute_seconds: f64,
    /// Sweep these cluster sizes (comma-separated) instead of pricing one.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<usize>>,
    /// Scaling regime for sweeps: weak or strong.
    #[arg(long, default_value = "weak")]
    mode: String,
    /// Single-worker iteration count the sweep amortizes.
    #[arg(long, default_value_t = 1000.0)]
    baseline_iterations: f64,
    /// Write sweep rows to this CSV file instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunLocalArgs {
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 1000)]
    elements: usize,
    #[arg(long, default_value_t = 8)]
    width_bytes: usize,
    #[arg(long, default_value_t = 5)]
    iterations: u64,
    #[arg(long, default_value = "gdraa", value_parser = parse_collective)]
    collective: CollectiveKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 2)]
    workers: usize,
    /// Samples each worker consumes per iteration.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    epochs: u32,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    features: usize,
    /// Problem family: least-squares or logistic.
    #[arg(long, default_value = "least-squares")]
    problem: String,
    /// Ridge coefficient.
    #[arg(long, default_value_t = 0.001)]
    lambda: f64,
    /// Label noise for least squares.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.001)]
    weight_decay: f64,
    /// Learning-rate schedule: constant or poly.
    #[arg(long, default_value = "constant")]
    lr_policy: String,
    #[arg(long, default_value_t = 2.0)]
    poly_power: f64,
    #[arg(long, default_value = "gdraa", value_parser = parse_collective)]
    collective: CollectiveKind,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    width_bytes: usize,
    /// Write `iter,loss,lr,bytes_sent` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PcrArgs {
    /// Wall time of the run in seconds.
    #[arg(long)]
    time_s: f64,
    /// Processors the run occupied.
    #[arg(long)]
    processors: u64,
    /// Baseline time; when given, the speedup is printed too.
    #[arg(long)]
    baseline_s: Option<f64>,
}

#[derive(Args)]
struct SocketWorkerArgs {
    #[arg(long)]
    rank: u32,
    #[arg(long)]
    workers: usize,
    #[arg(long)]
    elements: usize,
    #[arg(long)]
    width_bytes: usize,
    #[arg(long)]
    iterations: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_parser = parse_collective)]
    collective: CollectiveKind,
    /// Comma-separated listen addresses, one per endpoint, indexed by rank.
    #[arg(long, value_delimiter = ',')]
    addrs: Vec<std::net::SocketAddr>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::AllreduceCheck(args) => allreduce_check(args),
        Command::Simulate(args) => simulate(args),
        Command::RunLocal(args) => run_local(args),
        Command::Train(args) => train(args),
        Command::Pcr(args) => pcr(args),
        Command::SocketWorker(args) => socket_worker(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn allreduce_check(args: AllreduceCheckArgs) -> Result<(), String> {
    let width = parse_width(args.width_bytes)?;
    let session = loopback_allreduce_session(
        args.collective,
        args.workers,
        args.elements,
        width,
        args.iterations,
        args.seed,
    )
    .map_err(|e| e.to_string())?;

    let mut failures = 0usize;
    for row in &session {
        // Recompute the reference: per-rank synthetic gradients, summed in
        // ascending rank order at full f64, with each contribution and the
        // final aggregate rounded through the wire width.
        let contribs: Vec<Vec<f64>> = (0..args.workers as u32)
            .map(|r| {
                let mut g = gen_gradient(args.seed, r, row.iteration, args.elements);
                width.round_to_wire(&mut g);
                g
            })
            .collect();
        let refs: Vec<&[f64]> = contribs.iter().map(|c| c.as_slice()).collect();
        let mut expect = vec![0.0; args.elements];
        reduce_mean_ascending(&refs, &mut expect);
        width.round_to_wire(&mut expect);

        let worst = row
            .result
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0f64, f64::max);
        let ok = worst <= 1e-6;
        if !ok {
            failures += 1;
        }
        println!(
            "iter={} result_sha256={} max_rel_err={worst:.3e} {}",
            row.iteration,
            row.digest,
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    let stats = &session.last().expect("at least one iteration").stats[0];
    println!(
        "collective={} workers={} elements={} sync_waits_per_iteration={} bytes_sent_rank0={}",
        args.collective,
        args.workers,
        args.elements,
        stats.sync_waits,
        stats.total_bytes_sent()
    );
    if failures > 0 {
        return Err(format!("{failures} iteration(s) diverged from the reference"));
    }
    println!("all {} iterations match the reference", session.len());
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), String> {
    let width = parse_width(args.width_bytes)?;
    let spec = ClusterSpec {
        alpha_s: args.alpha,
        beta_bytes_per_s: args.beta,
        switch_bytes_per_s: args.switch,
        agg_flops_per_s: args.agg_flops,
        compute: ComputeModel::FixedSeconds(args.compute_seconds),
        per_worker_batch: 1,
    };

    if let Some(sweep) = args.sweep {
        let mode = match args.mode.as_str() {
            "weak" => ScalingMode::Weak,
            "strong" => ScalingMode::Strong,
            other => return Err(format!("unknown mode '{other}' (weak or strong)")),
        };
        let cfg = ScalingConfig {
            collective: args.collective,
            elements: args.elements,
            width,
            spec,
            baseline_iterations: args.baseline_iterations,
            mode,
        };
        let rows = scaling_run(&cfg, &sweep).map_err(|e| e.to_string())?;
        match args.csv {
            Some(path) => {
                let mut f = std::fs::File::create(&path).map_err(|e| e.to_string())?;
                write_csv(&rows, &mut f).map_err(|e| e.to_string())?;
                println!("wrote {} rows to {}", rows.len(), path.display());
            }
            None => {
                let mut out = std::io::stdout().lock();
                write_csv(&rows, &mut out).map_err(|e| e.to_string())?;
            }
        }
        return Ok(());
    }

    let report = engine::simulate(args.collective, &spec, args.workers, args.elements, width)
        .map_err(|e| e.to_string())?;
    println!("collective={}", report.collective);
    println!("workers={}", report.workers);
    println!("elements={} width_bytes={}", report.elements, report.width.bytes());
    println!("iteration_time_s={:.9}", report.iteration_time_s);
    println!("wire_bytes={}", report.wire_bytes);
    println!("wire_msgs={}", report.wire_msgs);
    println!("sync_waits_per_worker={}", report.sync_waits_per_worker);
    Ok(())
}

fn run_local(args: RunLocalArgs) -> Result<(), String> {
    let width = parse_width(args.width_bytes)?;
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    println!(
        "spawning {} socket endpoint(s) for collective={} elements={} iterations={}",
        match args.collective {
            CollectiveKind::ParamServer => args.workers + 1,
            _ => args.workers,
        },
        args.collective,
        args.elements,
        args.iterations
    );
    let socket_digests = spawn_local_cluster(
        &exe,
        args.collective,
        args.workers,
        args.elements,
        width,
        args.iterations,
        args.seed,
    )
    .map_err(|e| e.to_string())?;

    // Same parameters in-process; the fixed aggregation order makes the
    // results identical regardless of transport.
    let session = loopback_allreduce_session(
        args.collective,
        args.workers,
        args.elements,
        width,
        args.iterations,
        args.seed,
    )
    .map_err(|e| e.to_string())?;

    let mut failures = 0usize;
    for row in &session {
        let i = (row.iteration - 1) as usize;
        let mut ok = true;
        for (rank, digests) in socket_digests.iter().enumerate() {
            if digests[i].1 != row.digest {
                eprintln!(
                    "iteration {}: socket rank {rank} digest {} != loopback {}",
                    row.iteration, digests[i].1, row.digest
                );
                ok = false;
            }
        }
        if !ok {
            failures += 1;
        }
        println!(
            "iter={} digest={} socket_ranks_agree={}",
            row.iteration,
            row.digest,
            if ok { "yes" } else { "NO" }
        );
    }
    if failures > 0 {
        return Err(format!(
            "{failures} iteration(s) differ between socket and in-process runs"
        ));
    }
    println!(
        "{} workers over sockets reproduced the in-process results for all {} iterations",
        args.workers, args.iterations
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), String> {
    let width = parse_width(args.width_bytes)?;
    let problem = match args.problem.as_str() {
        "least-squares" => SyntheticProblem::least_squares(
            args.seed,
            args.samples,
            args.features,
            args.lambda,
            args.noise,
        ),
        "logistic" => SyntheticProblem::logistic(args.seed, args.samples, args.features, args.lambda),
        other => return Err(format!("unknown problem '{other}'")),
    };

    let mut setup = TrainSetup::new(args.collective, args.workers, args.batch, args.epochs);
    setup.width = width;
    let spec = setup.job_spec(&problem, "cli-train");
    let total_updates = spec.total_iterations();
    let policy = match args.lr_policy.as_str() {
        "constant" => LrPolicy::Constant,
        "poly" => LrPolicy::Poly {
            power: args.poly_power,
            max_updates: total_updates,
        },
        other => return Err(format!("unknown lr policy '{other}'")),
    };
    let opt = SsgdConfig {
        lr0: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        policy,
    };

    let outcome = train_distributed(&problem, opt, &setup).map_err(|e| e.to_string())?;
    let report = outcome.report.as_ref().expect("distributed run has a report");

    // Per-iteration wire bytes, summed over ranks.
    let mut bytes_per_iter = vec![0u64; report.iterations as usize];
    for r in &report.records {
        bytes_per_iter[(r.iteration - 1) as usize] += r.bytes_sent;
    }

    if let Some(path) = &args.csv {
        let mut f = std::fs::File::create(path).map_err(|e| e.to_string())?;
        writeln!(f, "iter,loss,lr,bytes_sent").map_err(|e| e.to_string())?;
        for (i, loss) in outcome.losses.iter().enumerate() {
            writeln!(
                f,
                "{},{:.12},{:.9},{}",
                i + 1,
                loss,
                outcome.learning_rates[i],
                bytes_per_iter[i]
            )
            .map_err(|e| e.to_string())?;
        }
        println!("wrote {} rows to {}", outcome.losses.len(), path.display());
    }

    println!(
        "trained '{}' on {} workers ({}): {} iterations, {} checkpoints",
        args.problem, args.workers, args.collective, report.iterations, report.checkpoints
    );
    println!(
        "loss {:.6} -> {:.6}",
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "replicas identical on all ranks: final weights sha256={}",
        outcome.final_digests[0]
    );
    println!(
        "total_seconds={:.6} (wall {:.6} + staging {:.6} + checkpoints {:.6})",
        report.total_seconds, report.wall_seconds, report.staging_seconds, report.checkpoint_seconds
    );
    if problem.kind() == gdraa::harness::problem::ProblemKind::LeastSquares {
        let optimum = problem.closed_form_optimum();
        let dist: f64 = outcome
            .final_weights
            .iter()
            .zip(&optimum)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        println!("distance_to_closed_form_optimum={dist:.6e}");
    }
    Ok(())
}

fn pcr(args: PcrArgs) -> Result<(), String> {
    if args.time_s <= 0.0 || args.processors == 0 {
        return Err("time and processors must be positive".into());
    }
    println!("pcr={:.6e}", compute_pcr(args.time_s, args.processors));
    if let Some(base) = args.baseline_s {
        println!("speedup={:.4}", speedup(base, args.time_s));
    }
    Ok(())
}

fn socket_worker(args: SocketWorkerArgs) -> Result<(), String> {
    let width = parse_width(args.width_bytes)?;
    let endpoints = match args.collective {
        CollectiveKind::ParamServer => args.workers + 1,
        _ => args.workers,
    };
    if args.addrs.len() != endpoints {
        return Err(format!(
            "need {endpoints} addresses for {} with {} workers, got {}",
            args.collective,
            args.workers,
            args.addrs.len()
        ));
    }
    let digests = run_socket_session(&SocketSessionArgs {
        kind: args.collective,
        rank: args.rank,
        workers: args.workers,
        elements: args.elements,
        width,
        iterations: args.iterations,
        seed: args.seed,
        addrs: args.addrs,
    })
    .map_err(|e| e.to_string())?;
    let mut out = std::io::stdout().lock();
    for (nu, digest) in digests {
        writeln!(out, "iter={nu} result_sha256={digest}").map_err(|e| e.to_string())?;
    }
    Ok(())
}
