//! The training job server: admission, staging, iteration barriers,
//! checkpoints, and liveness.
//!
//! One server node owns the control plane for a run. A job is admitted only
//! if the staging tier can hold its dataset and the cluster has the workers
//! it asks for; staging and checkpoint writes are charged as simulated time
//! against the tier's bandwidth rather than slept through. After every
//! worker reports ready, the server drives a strict iteration barrier:
//! `IterStart(ν+1)` goes out only once all `n` `IterDone(ν)` reports are in,
//! which caps worker drift at one iteration — the data plane's overlap
//! window is designed around exactly that bound.
//!
//! Liveness is heartbeat-based. Workers beat from inside their
//! synchronization waits (see the collectives' progress hooks), so a wedged
//! rank goes quiet while healthy ranks keep beating; after a configurable
//! number of missed periods the server aborts the run and names the
//! stragglers.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::buffers::MAX_WORKERS;
use crate::collectives::IterationStats;
use crate::transport::{ControlKind, ControlMessage, ControlPlane, NodeId, TransportError};

/// Everything that defines a training job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub name: String,
    pub dataset_bytes: u64,
    pub samples: u64,
    pub epochs: u32,
    pub workers: usize,
    pub batch_per_worker: usize,
    pub elements: usize,
    pub width_bytes: usize,
}

impl JobSpec {
    /// Iterations needed to see every sample once.
    pub fn epoch_iterations(&self) -> u64 {
        let per_iter = (self.workers * self.batch_per_worker) as u64;
        self.samples.div_ceil(per_iter)
    }

    /// Iterations in the whole run.
    pub fn total_iterations(&self) -> u64 {
        self.epochs as u64 * self.epoch_iterations()
    }

    /// Bytes one checkpoint writes: the full model at wire width.
    pub fn checkpoint_bytes(&self) -> u64 {
        (self.elements * self.width_bytes) as u64
    }

    /// Serialize as sorted `key=value` lines, the same grammar the control
    /// plane speaks.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("batch_per_worker", self.batch_per_worker.to_string()),
            ("dataset_bytes", self.dataset_bytes.to_string()),
            ("elements", self.elements.to_string()),
            ("epochs", self.epochs.to_string()),
            ("name", self.name.clone()),
            ("samples", self.samples.to_string()),
            ("width_bytes", self.width_bytes.to_string()),
            ("workers", self.workers.to_string()),
        ] {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn from_kv_str(text: &str) -> Result<Self, JobError> {
        let mut map = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| JobError::Protocol(format!("bad job line '{line}'")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String, JobError> {
            map.get(k)
                .cloned()
                .ok_or_else(|| JobError::Protocol(format!("job spec missing '{k}'")))
        };
        let num = |k: &str| -> Result<u64, JobError> {
            get(k)?
                .parse()
                .map_err(|e| JobError::Protocol(format!("job key '{k}': {e}")))
        };
        Ok(JobSpec {
            name: get("name")?,
            dataset_bytes: num("dataset_bytes")?,
            samples: num("samples")?,
            epochs: num("epochs")? as u32,
            workers: num("workers")? as usize,
            batch_per_worker: num("batch_per_worker")? as usize,
            elements: num("elements")? as usize,
            width_bytes: num("width_bytes")? as usize,
        })
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<(), JobError> {
        std::fs::write(path, self.to_kv_string())
            .map_err(|e| JobError::Protocol(format!("writing {}: {e}", path.display())))
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self, JobError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| JobError::Protocol(format!("reading {}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }
}

/// Where datasets are staged before a run and checkpoints written during it.
#[derive(Debug, Clone, PartialEq)]
pub struct StagingTier {
    pub name: String,
    pub capacity_bytes: u64,
    pub bandwidth_bytes_per_s: f64,
}

impl StagingTier {
    /// A burst-buffer-class tier: 2 TB at 10 GB/s.
    pub fn burst_buffer() -> Self {
        StagingTier {
            name: "burst-buffer".into(),
            capacity_bytes: 2_000_000_000_000,
            bandwidth_bytes_per_s: 1.0e10,
        }
    }

    pub fn transfer_seconds(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth_bytes_per_s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error(transparent)]
    Control(#[from] TransportError),
    #[error("dataset of {dataset_bytes} bytes exceeds tier '{tier}' capacity of {capacity_bytes} bytes")]
    DatasetTooLarge {
        dataset_bytes: u64,
        capacity_bytes: u64,
        tier: String,
    },
    #[error("job wants {requested} workers but the cluster has {available}")]
    InsufficientWorkers { requested: usize, available: usize },
    #[error("iteration {iteration}: no heartbeat from ranks {ranks:?} for {silent:?}; aborting run")]
    Stragglers {
        iteration: u64,
        ranks: Vec<u32>,
        silent: Duration,
    },
    #[error("worker {rank} reported failure: {detail}")]
    WorkerFailure { rank: u32, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerState {
    Joining,
    Ready,
    Running,
    Finished,
}

#[derive(Debug, Clone, Copy)]
pub struct WorkerHealth {
    pub state: WorkerState,
    pub last_heartbeat: Instant,
    /// Last iteration this worker reported done (0 before the first).
    pub done_iteration: u64,
    pub heartbeats: u64,
}

/// Shared view of worker health, for dashboards and tests.
#[derive(Clone)]
pub struct MonitorHandle {
    inner: Arc<Mutex<HashMap<u32, WorkerHealth>>>,
}

impl MonitorHandle {
    pub fn snapshot(&self) -> HashMap<u32, WorkerHealth> {
        self.inner.lock().unwrap().clone()
    }
}

#[derive(Debug, Clone)]
pub struct JobServerConfig {
    /// Expected worker heartbeat period.
    pub heartbeat_period: Duration,
    /// Missed periods before a rank counts as a straggler.
    pub missed_heartbeats: u32,
    /// How long to wait for the ready barrier after staging.
    pub ready_timeout: Duration,
}

impl Default for JobServerConfig {
    fn default() -> Self {
        JobServerConfig {
            heartbeat_period: Duration::from_secs(1),
            missed_heartbeats: 3,
            ready_timeout: Duration::from_secs(30),
        }
    }
}

/// One worker's contribution to one iteration, as reported over control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterRecord {
    pub iteration: u64,
    pub rank: u32,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub msgs_sent: u64,
    pub sync_waits: u64,
}

/// Everything the server knows after a run completes.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub job_name: String,
    pub workers: usize,
    pub iterations: u64,
    pub epoch_iterations: u64,
    pub checkpoints: u64,
    /// Simulated dataset staging time.
    pub staging_seconds: f64,
    /// Simulated checkpoint write time.
    pub checkpoint_seconds: f64,
    /// Measured orchestration wall time.
    pub wall_seconds: f64,
    /// Wall + staging + checkpoints: what the job would have cost.
    pub total_seconds: f64,
    pub records: Vec<IterRecord>,
    pub log: Vec<String>,
}

impl RunReport {
    /// `iteration,rank,bytes_sent,bytes_received,msgs_sent,sync_waits` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "iteration,rank,bytes_sent,bytes_received,msgs_sent,sync_waits")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration, r.rank, r.bytes_sent, r.bytes_received, r.msgs_sent, r.sync_waits
            )?;
        }
        Ok(())
    }
}

// Control-message constructors and parsers shared by server and workers, so
// field names can't drift apart.

pub fn job_submit_message(spec: &JobSpec) -> ControlMessage {
    ControlMessage::new(ControlKind::JobSubmit, NodeId::JobServer, 0)
        .with("name", &spec.name)
        .with("iterations", spec.total_iterations())
        .with("epoch_iterations", spec.epoch_iterations())
        .with("elements", spec.elements)
        .with("width_bytes", spec.width_bytes)
        .with("workers", spec.workers)
}

pub fn stage_data_message(spec: &JobSpec, tier: &StagingTier, seconds: f64) -> ControlMessage {
    ControlMessage::new(ControlKind::StageData, NodeId::JobServer, 0)
        .with("dataset_bytes", spec.dataset_bytes)
        .with("tier", &tier.name)
        .with("seconds", seconds)
}

pub fn worker_ready_message(rank: u32) -> ControlMessage {
    ControlMessage::new(ControlKind::WorkerReady, NodeId::Worker(rank), 0)
}

pub fn iter_start_message(iteration: u64) -> ControlMessage {
    ControlMessage::new(ControlKind::IterStart, NodeId::JobServer, iteration)
}

pub fn heartbeat_message(rank: u32, iteration: u64) -> ControlMessage {
    ControlMessage::new(ControlKind::Heartbeat, NodeId::Worker(rank), iteration)
}

pub fn iter_done_message(rank: u32, stats: &IterationStats) -> ControlMessage {
    ControlMessage::new(ControlKind::IterDone, NodeId::Worker(rank), stats.iteration)
        .with("bytes_sent", stats.total_bytes_sent())
        .with("bytes_received", stats.total_bytes_received())
        .with("msgs_sent", stats.total_msgs_sent())
        .with("sync_waits", stats.sync_waits)
        .with("agg_adds", stats.agg_adds)
        .with("agg_muls", stats.agg_muls)
}

fn parse_iter_done(msg: &ControlMessage) -> Result<IterRecord, JobError> {
    let rank = match msg.sender {
        NodeId::Worker(r) => r,
        NodeId::JobServer => {
            return Err(JobError::Protocol("iter_done from the job server".into()))
        }
    };
    let field = |k: &str| {
        msg.get_u64(k)
            .ok_or_else(|| JobError::Protocol(format!("iter_done missing '{k}'")))
    };
    Ok(IterRecord {
        iteration: msg.iteration,
        rank,
        bytes_sent: field("bytes_sent")?,
        bytes_received: field("bytes_received")?,
        msgs_sent: field("msgs_sent")?,
        sync_waits: field("sync_waits")?,
    })
}

pub fn checkpoint_done_message(iteration: u64, index: u64) -> ControlMessage {
    ControlMessage::new(ControlKind::CheckpointDone, NodeId::JobServer, iteration)
        .with("checkpoint", index)
}

pub fn shutdown_message(iteration: u64) -> ControlMessage {
    ControlMessage::new(ControlKind::Shutdown, NodeId::JobServer, iteration)
}

/// The server itself. Drives one job at a time over a control plane.
pub struct JobServer<C: ControlPlane> {
    control: C,
    available_workers: usize,
    config: JobServerConfig,
    health: Arc<Mutex<HashMap<u32, WorkerHealth>>>,
    log: Vec<String>,
}

impl<C: ControlPlane> JobServer<C> {
    pub fn new(control: C, available_workers: usize) -> Self {
        JobServer {
            control,
            available_workers,
            config: JobServerConfig::default(),
            health: Arc::new(Mutex::new(HashMap::new())),
            log: Vec::new(),
        }
    }

    pub fn with_config(mut self, config: JobServerConfig) -> Self {
        self.config = config;
        self
    }

    pub fn monitor(&self) -> MonitorHandle {
        MonitorHandle {
            inner: Arc::clone(&self.health),
        }
    }

    fn note(&mut self, line: String) {
        self.log.push(line);
    }

    fn broadcast(&mut self, workers: usize, msg: &ControlMessage) -> Result<(), JobError> {
        for rank in 0..workers as u32 {
            self.control.send_control(NodeId::Worker(rank), msg.clone())?;
        }
        Ok(())
    }

    fn touch(&self, rank: u32, f: impl FnOnce(&mut WorkerHealth)) {
        let mut health = self.health.lock().unwrap();
        let entry = health.entry(rank).or_insert(WorkerHealth {
            state: WorkerState::Joining,
            last_heartbeat: Instant::now(),
            done_iteration: 0,
            heartbeats: 0,
        });
        entry.last_heartbeat = Instant::now();
        f(entry);
    }

    /// Ranks silent longer than the configured allowance.
    fn stale_ranks(&self, now: Instant) -> Vec<u32> {
        let allowance = self.config.heartbeat_period * self.config.missed_heartbeats;
        let health = self.health.lock().unwrap();
        let mut stale: Vec<u32> = health
            .iter()
            .filter(|(_, h)| {
                h.state != WorkerState::Finished
                    && now.duration_since(h.last_heartbeat) > allowance
            })
            .map(|(&r, _)| r)
            .collect();
        stale.sort_unstable();
        stale
    }

    /// Validate the job, stage its dataset, and bring every worker to ready.
    /// Returns the simulated staging time.
    pub fn submit_job(&mut self, spec: &JobSpec, tier: &StagingTier) -> Result<f64, JobError> {
        if spec.workers > self.available_workers {
            return Err(JobError::InsufficientWorkers {
                requested: spec.workers,
                available: self.available_workers,
            });
        }
        if spec.workers == 0 || spec.workers > MAX_WORKERS {
            return Err(JobError::Protocol(format!(
                "worker count {} out of range 1..={MAX_WORKERS}",
                spec.workers
            )));
        }
        if spec.dataset_bytes > tier.capacity_bytes {
            return Err(JobError::DatasetTooLarge {
                dataset_bytes: spec.dataset_bytes,
                capacity_bytes: tier.capacity_bytes,
                tier: tier.name.clone(),
            });
        }

        let staging = tier.transfer_seconds(spec.dataset_bytes);
        self.note(format!(
            "job '{}' admitted: {} workers, {} iterations ({} per epoch)",
            spec.name,
            spec.workers,
            spec.total_iterations(),
            spec.epoch_iterations()
        ));
        self.note(format!(
            "staged {} bytes to {} in {:.6} s (simulated)",
            spec.dataset_bytes, tier.name, staging
        ));

        self.broadcast(spec.workers, &job_submit_message(spec))?;
        self.broadcast(spec.workers, &stage_data_message(spec, tier, staging))?;

        // Ready barrier.
        let deadline = Instant::now() + self.config.ready_timeout;
        let mut ready = vec![false; spec.workers];
        while ready.iter().any(|r| !r) {
            let now = Instant::now();
            if now >= deadline {
                let missing: Vec<u32> = (0..spec.workers as u32)
                    .filter(|&r| !ready[r as usize])
                    .collect();
                return Err(JobError::Stragglers {
                    iteration: 0,
                    ranks: missing,
                    silent: self.config.ready_timeout,
                });
            }
            let slice = (deadline - now).min(Duration::from_millis(5));
            if let Some(msg) = self.control.recv_control(Some(slice))? {
                if let NodeId::Worker(r) = msg.sender {
                    self.touch(r, |h| {
                        if msg.kind == ControlKind::WorkerReady {
                            h.state = WorkerState::Ready;
                        }
                        if msg.kind == ControlKind::Heartbeat {
                            h.heartbeats += 1;
                        }
                    });
                    if msg.kind == ControlKind::WorkerReady && (r as usize) < ready.len() {
                        ready[r as usize] = true;
                    }
                }
            }
        }
        self.note(format!("all {} workers ready", spec.workers));
        Ok(staging)
    }

    /// Drive the iteration barrier to completion and shut the cluster down.
    pub fn run(&mut self, spec: &JobSpec, tier: &StagingTier) -> Result<RunReport, JobError> {
        let staging = self.submit_job(spec, tier)?;
        let workers = spec.workers;
        let total = spec.total_iterations();
        let epoch_iters = spec.epoch_iterations();
        let started = Instant::now();
        let mut records = Vec::with_capacity((total as usize) * workers);
        let mut checkpoints = 0u64;
        let mut checkpoint_seconds = 0.0;

        for nu in 1..=total {
            self.broadcast(workers, &iter_start_message(nu))?;
            if let Err(e) = self.await_iteration(workers, nu, &mut records) {
                // Give healthy workers their exit before surfacing the abort.
                let _ = self.broadcast(workers, &shutdown_message(nu));
                return Err(e);
            }
            self.note(format!("iteration {nu}/{total} complete"));

            if nu % epoch_iters == 0 {
                checkpoints += 1;
                let secs = tier.transfer_seconds(spec.checkpoint_bytes());
                checkpoint_seconds += secs;
                self.note(format!(
                    "checkpoint {checkpoints} written after iteration {nu} ({} bytes, {:.6} s simulated)",
                    spec.checkpoint_bytes(),
                    secs
                ));
                self.broadcast(workers, &checkpoint_done_message(nu, checkpoints))?;
            }
        }

        self.broadcast(workers, &shutdown_message(total))?;
        {
            let mut health = self.health.lock().unwrap();
            for h in health.values_mut() {
                h.state = WorkerState::Finished;
            }
        }
        let wall = started.elapsed().as_secs_f64();
        self.note(format!(
            "run complete: wall {:.6} s + staging {:.6} s + checkpoints {:.6} s",
            wall, staging, checkpoint_seconds
        ));

        Ok(RunReport {
            job_name: spec.name.clone(),
            workers,
            iterations: total,
            epoch_iterations: epoch_iters,
            checkpoints,
            staging_seconds: staging,
            checkpoint_seconds,
            wall_seconds: wall,
            total_seconds: wall + staging + checkpoint_seconds,
            records,
            log: self.log.clone(),
        })
    }

    /// Collect `IterDone(nu)` from every worker, processing heartbeats and
    /// watching for stragglers meanwhile.
    fn await_iteration(
        &mut self,
        workers: usize,
        nu: u64,
        records: &mut Vec<IterRecord>,
    ) -> Result<(), JobError> {
        let mut done = vec![false; workers];
        while done.iter().any(|d| !d) {
            let msg = self
                .control
                .recv_control(Some(Duration::from_millis(5)))?;
            if let Some(msg) = msg {
                match msg.kind {
                    ControlKind::Heartbeat => {
                        if let NodeId::Worker(r) = msg.sender {
                            self.touch(r, |h| {
                                h.heartbeats += 1;
                                h.state = WorkerState::Running;
                            });
                        }
                    }
                    ControlKind::IterDone => {
                        let record = parse_iter_done(&msg)?;
                        if record.iteration != nu {
                            return Err(JobError::Protocol(format!(
                                "rank {} reported iteration {} inside barrier {}",
                                record.rank, record.iteration, nu
                            )));
                        }
                        self.touch(record.rank, |h| {
                            h.state = WorkerState::Running;
                            h.done_iteration = nu;
                        });
                        if (record.rank as usize) < workers {
                            done[record.rank as usize] = true;
                        }
                        records.push(record);
                    }
                    ControlKind::Shutdown => {
                        return Err(JobError::Protocol(
                            "unexpected shutdown on the server's queue".into(),
                        ));
                    }
                    _ => {}
                }
            }
            let now = Instant::now();
            let stale = self.stale_ranks(now);
            if !stale.is_empty() {
                let allowance = self.config.heartbeat_period * self.config.missed_heartbeats;
                self.note(format!(
                    "iteration {nu}: ranks {stale:?} silent beyond {allowance:?}; aborting"
                ));
                return Err(JobError::Stragglers {
                    iteration: nu,
                    ranks: stale,
                    silent: allowance,
                });
            }
        }
        Ok(())
    }
}
