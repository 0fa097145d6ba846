//! Driver loops that tie everything together: pure all-reduce sessions over
//! loopback or sockets (for correctness and parity checks), and full
//! training runs where a job server orchestrates workers that shard batches,
//! average gradients through a collective, and replicate the optimizer.
//!
//! Model updates are deliberately deferred: the aggregate produced by
//! iteration ν is applied at the top of iteration ν+1, and the last one is
//! drained after shutdown. That keeps the optimizer off the critical path of
//! the collective without changing the sequence of iterates.

use std::net::SocketAddr;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::buffers::{partition, ElementWidth};
use crate::collectives::gdraa::GdraaWorker;
use crate::collectives::param_server::{server_rank, PsServer, PsWorker};
use crate::collectives::ring::RingWorker;
use crate::collectives::{Collective, CollectiveError, CollectiveKind, IterationStats};
use crate::harness::problem::SyntheticProblem;
use crate::harness::sgd::{SgdOptimizer, SsgdConfig};
use crate::jobserver::{
    heartbeat_message, iter_done_message, worker_ready_message, JobError, JobServer,
    JobServerConfig, JobSpec, MonitorHandle, RunReport, StagingTier,
};
use crate::transport::loopback::LoopbackFabric;
use crate::transport::socket::{connect_mesh, MeshConfig};
use crate::transport::{ControlKind, ControlPlane, NodeId};

/// How often a busy worker heartbeats the job server.
pub const HEARTBEAT_PERIOD: Duration = Duration::from_millis(250);

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error("replicas diverged at iteration {iteration}: {details}")]
    Divergence { iteration: u64, details: String },
    #[error("worker subprocess failed: {0}")]
    Subprocess(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deterministic synthetic gradient for `(rank, iteration)`: uniform values
/// in `[-1, 1)` drawn from a stream keyed by both, so every process in a run
/// can regenerate any worker's contribution.
pub fn gen_gradient(seed: u64, rank: u32, iteration: u64, elements: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration << 16) ^ rank as u64);
    (0..elements).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Hex SHA-256 over the little-endian bytes of the values: a compact,
/// process-independent fingerprint for "bitwise identical".
pub fn digest_f64s(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    let out = h.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Sample indices for one rank's shard of iteration `iteration` (1-based):
/// the global window advances by `workers × batch` contiguous samples each
/// iteration and is split evenly by rank. Indices are raw positions; the
/// problem wraps them modulo its sample count.
pub fn shard_indices(iteration: u64, rank: u32, workers: usize, batch: usize) -> Vec<usize> {
    let start = (iteration - 1) as usize * workers * batch + rank as usize * batch;
    (start..start + batch).collect()
}

fn build_collective(
    fabric: &LoopbackFabric,
    kind: CollectiveKind,
    rank: u32,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> Result<Box<dyn Collective + Send>, CollectiveError> {
    match kind {
        CollectiveKind::Gdraa => {
            let blocks = partition(elements, workers)?;
            let data = fabric.data_endpoint(rank, blocks, width);
            Ok(Box::new(GdraaWorker::new(data, elements, width)?))
        }
        CollectiveKind::Ring => {
            let blocks = partition(elements, workers)?;
            let data = fabric.data_endpoint(rank, blocks, width);
            Ok(Box::new(RingWorker::new(data, elements, width)?))
        }
        CollectiveKind::ParamServer => {
            let blocks = partition(elements, 1)?;
            let data = fabric.data_endpoint(rank, blocks, width);
            Ok(Box::new(PsWorker::new(data, elements, width)?))
        }
    }
}

/// The loopback fabric a collective needs: one endpoint per worker, plus a
/// seat for the parameter server when that strategy is selected.
fn data_fabric(kind: CollectiveKind, workers: usize) -> LoopbackFabric {
    match kind {
        CollectiveKind::ParamServer => LoopbackFabric::new(workers + 1),
        _ => LoopbackFabric::new(workers),
    }
}

fn spawn_ps_server(
    fabric: &LoopbackFabric,
    workers: usize,
    elements: usize,
    width: ElementWidth,
    first: u64,
    last: u64,
) -> thread::JoinHandle<Result<(), CollectiveError>> {
    let blocks = partition(elements, 1).unwrap();
    let data = fabric.data_endpoint(server_rank(workers), blocks, width);
    thread::spawn(move || {
        let mut server = PsServer::new(data, elements, width)?;
        server.serve(first, last)?;
        Ok(())
    })
}

/// One iteration's outcome in a pure all-reduce session.
#[derive(Debug, Clone)]
pub struct SessionIteration {
    pub iteration: u64,
    /// Fingerprint of the result; identical on every rank by construction
    /// (the session errors out otherwise).
    pub digest: String,
    /// Rank 0's full result vector.
    pub result: Vec<f64>,
    /// Per-rank statistics, indexed by rank.
    pub stats: Vec<IterationStats>,
}

/// Run `iterations` all-reduces over an in-process fabric with synthetic
/// gradients from [`gen_gradient`], checking that every rank produced a
/// bitwise-identical result each iteration.
pub fn loopback_allreduce_session(
    kind: CollectiveKind,
    workers: usize,
    elements: usize,
    width: ElementWidth,
    iterations: u64,
    seed: u64,
) -> Result<Vec<SessionIteration>, HarnessError> {
    let fabric = data_fabric(kind, workers);
    let server = (kind == CollectiveKind::ParamServer)
        .then(|| spawn_ps_server(&fabric, workers, elements, width, 1, iterations));

    let mut handles = Vec::new();
    for rank in 0..workers as u32 {
        let mut collective = build_collective(&fabric, kind, rank, workers, elements, width)?;
        handles.push(thread::spawn(move || -> Result<_, CollectiveError> {
            let mut per_iter = Vec::with_capacity(iterations as usize);
            for nu in 1..=iterations {
                let mut g = gen_gradient(seed, rank, nu, elements);
                let stats = collective.allreduce(nu, &mut g)?;
                let digest = digest_f64s(&g);
                let result = (rank == 0).then_some(g);
                per_iter.push((digest, result, stats));
            }
            Ok(per_iter)
        }));
    }

    let mut per_rank = Vec::with_capacity(workers);
    for h in handles {
        per_rank.push(h.join().expect("worker thread panicked")?);
    }
    if let Some(s) = server {
        s.join().expect("server thread panicked")?;
    }

    let mut out = Vec::with_capacity(iterations as usize);
    for nu in 1..=iterations {
        let i = (nu - 1) as usize;
        let reference = per_rank[0][i].0.clone();
        for (rank, rows) in per_rank.iter().enumerate().skip(1) {
            if rows[i].0 != reference {
                return Err(HarnessError::Divergence {
                    iteration: nu,
                    details: format!(
                        "rank {rank} produced {} but rank 0 produced {reference}",
                        rows[i].0
                    ),
                });
            }
        }
        out.push(SessionIteration {
            iteration: nu,
            digest: reference,
            result: per_rank[0][i].1.take().unwrap_or_default(),
            stats: per_rank.iter().map(|rows| rows[i].2).collect(),
        });
    }
    Ok(out)
}

/// Arguments for one endpoint of a socket-mesh session. A rank equal to
/// `workers` takes the parameter server's seat (only meaningful for that
/// strategy).
#[derive(Debug, Clone)]
pub struct SocketSessionArgs {
    pub kind: CollectiveKind,
    pub rank: u32,
    pub workers: usize,
    pub elements: usize,
    pub width: ElementWidth,
    pub iterations: u64,
    pub seed: u64,
    pub addrs: Vec<SocketAddr>,
}

/// Run one endpoint's share of an all-reduce session over real TCP sockets.
/// Returns `(iteration, digest)` per iteration — empty for the server seat.
pub fn run_socket_session(
    args: &SocketSessionArgs,
) -> Result<Vec<(u64, String)>, HarnessError> {
    let is_server =
        args.kind == CollectiveKind::ParamServer && args.rank == server_rank(args.workers);
    let layout_workers = match args.kind {
        CollectiveKind::ParamServer => 1,
        _ => args.workers,
    };
    let blocks = partition(args.elements, layout_workers).map_err(CollectiveError::from)?;
    let data = connect_mesh(MeshConfig {
        rank: args.rank,
        addrs: args.addrs.clone(),
        blocks,
        width: args.width,
    })
    .map_err(CollectiveError::from)?;

    if is_server {
        let mut server = PsServer::new(data, args.elements, args.width)?;
        server.serve(1, args.iterations)?;
        return Ok(Vec::new());
    }

    let mut collective: Box<dyn Collective + Send> = match args.kind {
        CollectiveKind::Gdraa => Box::new(GdraaWorker::new(data, args.elements, args.width)?),
        CollectiveKind::Ring => Box::new(RingWorker::new(data, args.elements, args.width)?),
        CollectiveKind::ParamServer => Box::new(PsWorker::new(data, args.elements, args.width)?),
    };

    let mut digests = Vec::with_capacity(args.iterations as usize);
    for nu in 1..=args.iterations {
        let mut g = gen_gradient(args.seed, args.rank, nu, args.elements);
        collective.allreduce(nu, &mut g)?;
        digests.push((nu, digest_f64s(&g)));
    }
    Ok(digests)
}

/// Spawn one OS process per endpoint running `<exe> socket-worker …` and
/// collect each worker's per-iteration digests. The exe must be this
/// project's CLI binary.
pub fn spawn_local_cluster(
    exe: &Path,
    kind: CollectiveKind,
    workers: usize,
    elements: usize,
    width: ElementWidth,
    iterations: u64,
    seed: u64,
) -> Result<Vec<Vec<(u64, String)>>, HarnessError> {
    let endpoints = match kind {
        CollectiveKind::ParamServer => workers + 1,
        _ => workers,
    };
    let addrs =
        crate::transport::socket::ephemeral_addrs(endpoints).map_err(CollectiveError::from)?;
    let addr_list = addrs
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(",");

    let mut children = Vec::with_capacity(endpoints);
    for rank in 0..endpoints {
        let child = Command::new(exe)
            .arg("socket-worker")
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--workers")
            .arg(workers.to_string())
            .arg("--elements")
            .arg(elements.to_string())
            .arg("--width-bytes")
            .arg(width.bytes().to_string())
            .arg("--iterations")
            .arg(iterations.to_string())
            .arg("--seed")
            .arg(seed.to_string())
            .arg("--collective")
            .arg(kind.as_str())
            .arg("--addrs")
            .arg(&addr_list)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        children.push(child);
    }

    let mut per_rank = Vec::with_capacity(workers);
    for (rank, child) in children.into_iter().enumerate() {
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(HarnessError::Subprocess(format!(
                "endpoint {rank} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        if rank >= workers {
            continue; // the server seat reports no digests
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let mut digests = Vec::new();
        for line in stdout.lines() {
            if let Some(rest) = line.strip_prefix("iter=") {
                let (nu, digest) = rest
                    .split_once(" result_sha256=")
                    .ok_or_else(|| HarnessError::Subprocess(format!("bad line '{line}'")))?;
                let nu = nu
                    .parse()
                    .map_err(|e| HarnessError::Subprocess(format!("bad iteration: {e}")))?;
                digests.push((nu, digest.to_string()));
            }
        }
        if digests.len() != iterations as usize {
            return Err(HarnessError::Subprocess(format!(
                "endpoint {rank} reported {} iterations, expected {iterations}",
                digests.len()
            )));
        }
        per_rank.push(digests);
    }
    Ok(per_rank)
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean loss per iteration, evaluated at the weights each gradient was
    /// computed against.
    pub losses: Vec<f64>,
    /// Learning rate used by each update.
    pub learning_rates: Vec<f64>,
    /// Final weights after the last update is drained.
    pub final_weights: Vec<f64>,
    /// Fingerprint of each iteration's aggregated gradient (identical on
    /// every rank; the run errors out otherwise).
    pub aggregate_digests: Vec<String>,
    /// Per-rank fingerprints of the final weights.
    pub final_digests: Vec<String>,
    /// The job server's report — absent for serial runs.
    pub report: Option<RunReport>,
}

/// Reference single-process trainer: iteration ν takes the same global
/// window of `global_batch` samples the cluster would share, updates
/// immediately, and records the loss at the pre-update weights.
pub fn train_serial(
    problem: &SyntheticProblem,
    opt_cfg: SsgdConfig,
    iterations: u64,
    global_batch: usize,
) -> TrainOutcome {
    let d = problem.features();
    let mut w = vec![0.0; d];
    let mut opt = SgdOptimizer::new(opt_cfg, d);
    let mut grad = vec![0.0; d];
    let mut losses = Vec::with_capacity(iterations as usize);
    let mut rates = Vec::with_capacity(iterations as usize);
    for nu in 1..=iterations {
        let indices = shard_indices(nu, 0, 1, global_batch);
        losses.push(problem.loss(&w, &indices));
        problem.gradient(&w, &indices, &mut grad);
        rates.push(opt.next_learning_rate());
        opt.step(&mut w, &grad);
    }
    let digest = digest_f64s(&w);
    TrainOutcome {
        losses,
        learning_rates: rates,
        final_weights: w,
        aggregate_digests: Vec::new(),
        final_digests: vec![digest],
        report: None,
    }
}

enum WorkerEvent {
    Iter {
        rank: u32,
        iteration: u64,
        loss: f64,
        digest: String,
    },
    Done {
        rank: u32,
        digest: String,
        weights: Option<Vec<f64>>,
        rates: Vec<f64>,
    },
}

/// Training options beyond the optimizer itself.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub collective: CollectiveKind,
    pub workers: usize,
    pub batch_per_worker: usize,
    pub epochs: u32,
    pub width: ElementWidth,
    pub server_config: JobServerConfig,
}

impl TrainSetup {
    pub fn new(collective: CollectiveKind, workers: usize, batch_per_worker: usize, epochs: u32) -> Self {
        TrainSetup {
            collective,
            workers,
            batch_per_worker,
            epochs,
            width: ElementWidth::Eight,
            server_config: JobServerConfig::default(),
        }
    }

    pub fn job_spec(&self, problem: &SyntheticProblem, name: &str) -> JobSpec {
        JobSpec {
            name: name.into(),
            dataset_bytes: (problem.samples() * problem.features() * 8) as u64,
            samples: problem.samples() as u64,
            epochs: self.epochs,
            workers: self.workers,
            batch_per_worker: self.batch_per_worker,
            elements: problem.features(),
            width_bytes: self.width.bytes(),
        }
    }
}

/// Train across an in-process cluster: a job server drives the iteration
/// barrier while each worker shards the batch, averages gradients through
/// the selected collective, and steps a replicated optimizer. Also returns
/// the monitor handle's final snapshot indirectly via the report's log.
pub fn train_distributed(
    problem: &SyntheticProblem,
    opt_cfg: SsgdConfig,
    setup: &TrainSetup,
) -> Result<TrainOutcome, HarnessError> {
    let spec = setup.job_spec(problem, "synthetic-train");
    let (outcome, _monitor) = train_distributed_with_monitor(problem, opt_cfg, setup, &spec)?;
    Ok(outcome)
}

/// As [`train_distributed`], but also hands back the job server's monitor so
/// callers can watch worker health while the run progresses.
pub fn train_distributed_with_monitor(
    problem: &SyntheticProblem,
    opt_cfg: SsgdConfig,
    setup: &TrainSetup,
    spec: &JobSpec,
) -> Result<(TrainOutcome, MonitorHandle), HarnessError> {
    let workers = setup.workers;
    let iterations = spec.total_iterations();
    let fabric = data_fabric(setup.collective, workers);
    let server = (setup.collective == CollectiveKind::ParamServer).then(|| {
        spawn_ps_server(&fabric, workers, problem.features(), setup.width, 1, iterations)
    });

    let (tx, rx) = mpsc::channel::<WorkerEvent>();
    let shared = Arc::new(problem.clone());
    let mut handles = Vec::new();
    for rank in 0..workers as u32 {
        let mut collective =
            build_collective(&fabric, setup.collective, rank, workers, problem.features(), setup.width)?;
        let mut control = fabric.control_endpoint(NodeId::Worker(rank));
        let mut beat_control = fabric.control_endpoint(NodeId::Worker(rank));
        let problem = Arc::clone(&shared);
        let tx = tx.clone();
        let opt_cfg = opt_cfg;
        let batch = setup.batch_per_worker;

        // Beat from inside the collective's waits so a healthy-but-blocked
        // worker is never mistaken for a straggler.
        let iter_cell = Arc::new(AtomicU64::new(0));
        let hook_cell = Arc::clone(&iter_cell);
        let mut last_beat = Instant::now();
        collective.set_progress_hook(Box::new(move || {
            if last_beat.elapsed() >= HEARTBEAT_PERIOD {
                let _ = beat_control.send_control(
                    NodeId::JobServer,
                    heartbeat_message(rank, hook_cell.load(Ordering::Relaxed)),
                );
                last_beat = Instant::now();
            }
        }));

        handles.push(thread::spawn(move || -> Result<(), HarnessError> {
            let d = problem.features();
            let mut w = vec![0.0; d];
            let mut opt = SgdOptimizer::new(opt_cfg, d);
            let mut grad = vec![0.0; d];
            let mut pending: Option<Vec<f64>> = None;
            let mut rates = Vec::new();
            let mut idle_beat = Instant::now();
            loop {
                let msg = match control
                    .recv_control(Some(Duration::from_millis(10)))
                    .map_err(CollectiveError::from)?
                {
                    Some(msg) => msg,
                    None => {
                        if idle_beat.elapsed() >= HEARTBEAT_PERIOD {
                            let _ = control.send_control(
                                NodeId::JobServer,
                                heartbeat_message(rank, iter_cell.load(Ordering::Relaxed)),
                            );
                            idle_beat = Instant::now();
                        }
                        continue;
                    }
                };
                match msg.kind {
                    ControlKind::JobSubmit => {}
                    ControlKind::StageData => {
                        control
                            .send_control(NodeId::JobServer, worker_ready_message(rank))
                            .map_err(CollectiveError::from)?;
                    }
                    ControlKind::IterStart => {
                        let nu = msg.iteration;
                        iter_cell.store(nu, Ordering::Relaxed);
                        if let Some(g) = pending.take() {
                            rates.push(opt.next_learning_rate());
                            opt.step(&mut w, &g);
                        }
                        let indices = shard_indices(nu, rank, workers, batch);
                        let loss = problem.loss(&w, &indices);
                        problem.gradient(&w, &indices, &mut grad);
                        let stats = collective.allreduce(nu, &mut grad)?;
                        tx.send(WorkerEvent::Iter {
                            rank,
                            iteration: nu,
                            loss,
                            digest: digest_f64s(&grad),
                        })
                        .ok();
                        pending = Some(grad.clone());
                        control
                            .send_control(NodeId::JobServer, iter_done_message(rank, &stats))
                            .map_err(CollectiveError::from)?;
                    }
                    ControlKind::CheckpointDone => {}
                    ControlKind::Shutdown => {
                        if let Some(g) = pending.take() {
                            rates.push(opt.next_learning_rate());
                            opt.step(&mut w, &g);
                        }
                        let digest = digest_f64s(&w);
                        tx.send(WorkerEvent::Done {
                            rank,
                            digest,
                            weights: (rank == 0).then_some(w),
                            rates,
                        })
                        .ok();
                        return Ok(());
                    }
                    _ => {}
                }
            }
        }));
    }
    drop(tx);

    let control = fabric.control_endpoint(NodeId::JobServer);
    let mut job_server =
        JobServer::new(control, workers).with_config(setup.server_config.clone());
    let monitor = job_server.monitor();
    let report = job_server.run(spec, &StagingTier::burst_buffer());

    let mut worker_errors = Vec::new();
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => worker_errors.push(e.to_string()),
            Err(_) => worker_errors.push("worker thread panicked".into()),
        }
    }
    if let Some(s) = server {
        match s.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => worker_errors.push(format!("parameter server: {e}")),
            Err(_) => worker_errors.push("parameter server thread panicked".into()),
        }
    }
    let report = report?;
    if !worker_errors.is_empty() {
        return Err(HarnessError::Subprocess(worker_errors.join("; ")));
    }

    // Fold the event stream into per-iteration aggregates and check that
    // every rank stayed bitwise identical throughout.
    let mut iter_digests: Vec<Option<String>> = vec![None; iterations as usize];
    let mut loss_sums = vec![0.0; iterations as usize];
    let mut loss_counts = vec![0usize; iterations as usize];
    let mut final_digests = vec![String::new(); workers];
    let mut final_weights = Vec::new();
    let mut learning_rates = Vec::new();
    for event in rx.iter() {
        match event {
            WorkerEvent::Iter {
                rank,
                iteration,
                loss,
                digest,
            } => {
                let i = (iteration - 1) as usize;
                loss_sums[i] += loss;
                loss_counts[i] += 1;
                match &iter_digests[i] {
                    None => iter_digests[i] = Some(digest),
                    Some(reference) if *reference == digest => {}
                    Some(reference) => {
                        return Err(HarnessError::Divergence {
                            iteration,
                            details: format!(
                                "rank {rank} aggregate {digest} differs from {reference}"
                            ),
                        });
                    }
                }
            }
            WorkerEvent::Done {
                rank,
                digest,
                weights,
                rates,
            } => {
                final_digests[rank as usize] = digest;
                if let Some(w) = weights {
                    final_weights = w;
                }
                if rank == 0 {
                    learning_rates = rates;
                }
            }
        }
    }
    for (rank, d) in final_digests.iter().enumerate() {
        if *d != final_digests[0] {
            return Err(HarnessError::Divergence {
                iteration: iterations,
                details: format!("rank {rank} final weights {d} differ from {}", final_digests[0]),
            });
        }
    }

    let losses = loss_sums
        .iter()
        .zip(&loss_counts)
        .map(|(s, c)| s / *c as f64)
        .collect();
    let outcome = TrainOutcome {
        losses,
        learning_rates,
        final_weights,
        aggregate_digests: iter_digests.into_iter().map(Option::unwrap).collect(),
        final_digests,
        report: Some(report),
    };
    Ok((outcome, monitor))
}
