//! α–β cost model of the cluster and the collectives' timing.
//!
//! A message of `b` bytes costs `α + b/β`: a fixed per-message latency plus
//! serialization on the sender's NIC at `β` bytes per second. Each worker's
//! NIC egresses one message at a time in the order the collective queues
//! them, while arrivals are absorbed concurrently — a one-sided write lands
//! without receiver involvement. The single exception is the parameter
//! server: its link is the whole point of that baseline's pathology, so
//! fan-in there is charged too, and `n` simultaneous requests of `L·w` bytes
//! complete only after `α + n·L·w/β`.
//!
//! Two independent routes produce each iteration's timeline: a resource
//! simulation stepping NIC busy-times message by message ([`engine`]), and
//! direct closed-form expressions ([`closed_form`]). Their agreement is
//! asserted in tests; [`scaling`] builds speedup tables on top.

pub mod closed_form;
pub mod engine;
pub mod scaling;

use crate::buffers::ElementWidth;
use crate::collectives::CollectiveKind;

/// Fixed per-message latency, seconds. Matches a small-cluster RDMA fabric.
pub const DEFAULT_ALPHA_S: f64 = 0.7e-6;

/// Per-NIC serialization rate, bytes per second: two 56 Gbit/s-class ports
/// bonded into one logical link.
pub const DEFAULT_BETA_BYTES_PER_S: f64 = 2.0 * 7.0e9;

/// How long one worker computes before each exchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComputeModel {
    /// A fixed wall time per iteration, independent of batch size.
    FixedSeconds(f64),
    /// Time proportional to the local batch.
    PerSample { seconds_per_sample: f64 },
}

impl ComputeModel {
    pub fn iteration_seconds(&self, batch: usize) -> f64 {
        match *self {
            ComputeModel::FixedSeconds(s) => s,
            ComputeModel::PerSample { seconds_per_sample } => {
                seconds_per_sample * batch as f64
            }
        }
    }
}

/// Everything the cost model knows about the cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    /// Per-message latency, seconds.
    pub alpha_s: f64,
    /// NIC serialization rate, bytes per second.
    pub beta_bytes_per_s: f64,
    /// Optional shared-switch capacity; `None` models a non-blocking fabric.
    pub switch_bytes_per_s: Option<f64>,
    /// Aggregation throughput in FLOP/s; `None` treats aggregation as free.
    pub agg_flops_per_s: Option<f64>,
    /// Per-iteration compute ahead of the exchange.
    pub compute: ComputeModel,
    /// Samples each worker processes per iteration.
    pub per_worker_batch: usize,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            alpha_s: DEFAULT_ALPHA_S,
            beta_bytes_per_s: DEFAULT_BETA_BYTES_PER_S,
            switch_bytes_per_s: None,
            agg_flops_per_s: None,
            compute: ComputeModel::FixedSeconds(0.0),
            per_worker_batch: 1,
        }
    }
}

impl ClusterSpec {
    /// Cost of one message: `α` alone for zero bytes, `α + b/β` otherwise.
    /// Suppressed (never-sent) messages cost nothing — don't call this.
    pub fn message_time(&self, bytes: u64) -> f64 {
        self.alpha_s + self.serialization_time(bytes)
    }

    /// Pure wire-serialization part of a message.
    pub fn serialization_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.beta_bytes_per_s
    }

    pub fn compute_seconds(&self) -> f64 {
        self.compute.iteration_seconds(self.per_worker_batch)
    }

    /// Time to aggregate `flops` floating-point operations.
    pub fn agg_seconds(&self, flops: u64) -> f64 {
        match self.agg_flops_per_s {
            Some(rate) => flops as f64 / rate,
            None => 0.0,
        }
    }
}

/// One simulated iteration's timeline for one collective.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub collective: CollectiveKind,
    pub workers: usize,
    pub elements: usize,
    pub width: ElementWidth,
    /// When each worker holds the full averaged gradient, seconds from
    /// iteration start.
    pub per_worker_end_s: Vec<f64>,
    /// The slowest worker's finish: the iteration's wall time.
    pub iteration_time_s: f64,
    /// Payload bytes crossing the fabric (all senders summed).
    pub wire_bytes: u64,
    /// Messages crossing the fabric.
    pub wire_msgs: u64,
    /// Blocking waits per worker per iteration.
    pub sync_waits_per_worker: u64,
}
