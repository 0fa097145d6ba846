//! All-reduce collectives over the one-sided data plane.
//!
//! Three interchangeable strategies compute the element-wise mean of the
//! workers' gradient buffers:
//!
//! * [`gdraa`] — direct reduce-scatter + broadcast, two synchronization
//!   waits per iteration regardless of cluster size;
//! * [`ring`] — the classic 2(n−1)-step ring, one wait per step;
//! * [`param_server`] — every worker ships its whole gradient to a central
//!   server and waits for the averaged reply.
//!
//! All three compute the same mean and divide exactly once. The direct and
//! parameter-server strategies sum contributions in ascending rank order, so
//! their aggregation is bitwise identical to a serial reference; the ring
//! necessarily sums in ring order, which reassociates the floating-point
//! additions but stays within ordinary rounding distance of the others.

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use crate::buffers::{BlockRange, BufferError, RegisteredRegion};
use crate::transport::{CompletionEvent, DataPlane, Phase, TransportError};

pub mod gdraa;
pub mod param_server;
pub mod ring;

/// Default ceiling on any single synchronization wait.
pub const DEFAULT_WAIT_TIMEOUT: Duration = Duration::from_secs(30);

/// How long each poll blocks before re-checking progress and firing the
/// progress hook. Short enough that heartbeats stay timely.
const POLL_SLICE: Duration = Duration::from_millis(5);

/// Which all-reduce strategy to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectiveKind {
    Gdraa,
    Ring,
    ParamServer,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 3] = [
        CollectiveKind::Gdraa,
        CollectiveKind::Ring,
        CollectiveKind::ParamServer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CollectiveKind::Gdraa => "gdraa",
            CollectiveKind::Ring => "ring",
            CollectiveKind::ParamServer => "param-server",
        }
    }
}

impl std::str::FromStr for CollectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gdraa" => Ok(CollectiveKind::Gdraa),
            "ring" => Ok(CollectiveKind::Ring),
            "param-server" | "ps" => Ok(CollectiveKind::ParamServer),
            other => Err(format!(
                "unknown collective '{other}' (expected gdraa, ring, or param-server)"
            )),
        }
    }
}

impl std::fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CollectiveError {
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("iteration {iteration} {phase:?} wait timed out after {waited:?}; no arrival from ranks {missing:?}")]
    PeerTimeout {
        iteration: u64,
        phase: Phase,
        waited: Duration,
        missing: Vec<u32>,
    },
    #[error("gradient on rank {rank} contains a non-finite value at element {index} (iteration {iteration})")]
    NonFiniteGradient {
        rank: u32,
        iteration: u64,
        index: usize,
    },
}

/// Wire traffic attributed to one logical phase of an iteration.
///
/// Byte fields count payload only; frame headers are tracked by the
/// transport. The ring maps its reduce pass here under `reduce_scatter` and
/// its all-gather pass under `broadcast`; the parameter server maps request
/// and reply the same way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTraffic {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub msgs_sent: u64,
    pub msgs_received: u64,
}

/// Everything one worker observed during one all-reduce call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IterationStats {
    pub iteration: u64,
    pub reduce_scatter: PhaseTraffic,
    pub broadcast: PhaseTraffic,
    /// Zero-length sends skipped without touching the wire.
    pub suppressed_sends: u64,
    /// Arrivals satisfied by bookkeeping because the block is empty.
    pub bookkeeping_arrivals: u64,
    /// Blocking synchronization points inside the call.
    pub sync_waits: u64,
    /// Floating-point additions spent aggregating.
    pub agg_adds: u64,
    /// Floating-point multiplications (the single divide per element).
    pub agg_muls: u64,
}

impl IterationStats {
    pub fn total_bytes_sent(&self) -> u64 {
        self.reduce_scatter.bytes_sent + self.broadcast.bytes_sent
    }

    pub fn total_bytes_received(&self) -> u64 {
        self.reduce_scatter.bytes_received + self.broadcast.bytes_received
    }

    pub fn total_msgs_sent(&self) -> u64 {
        self.reduce_scatter.msgs_sent + self.broadcast.msgs_sent
    }
}

/// A collective a worker can run once per training iteration.
pub trait Collective {
    fn rank(&self) -> u32;
    fn cluster_size(&self) -> usize;
    /// Replace `gradient` with the element-wise mean across all workers.
    fn allreduce(
        &mut self,
        iteration: u64,
        gradient: &mut [f64],
    ) -> Result<IterationStats, CollectiveError>;
    /// Install a callback fired regularly while blocked in a wait (used for
    /// liveness heartbeats).
    fn set_progress_hook(&mut self, hook: Box<dyn FnMut() + Send>);
}

/// Sum per-rank contributions in ascending rank order, then divide once by
/// the worker count. Returns `(adds, muls)`.
///
/// The fixed order makes every aggregation site — any worker, the parameter
/// server, or a reference computed elsewhere — bitwise identical on the same
/// inputs.
pub fn reduce_mean_ascending(contribs: &[&[f64]], out: &mut [f64]) -> (u64, u64) {
    let n = contribs.len();
    assert!(n > 0, "need at least one contribution");
    let len = out.len();
    for c in contribs {
        assert_eq!(c.len(), len, "contribution length mismatch");
    }
    out.copy_from_slice(contribs[0]);
    for c in &contribs[1..] {
        for (o, v) in out.iter_mut().zip(c.iter()) {
            *o += v;
        }
    }
    let inv = 1.0 / n as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    (((n - 1) * len) as u64, len as u64)
}

/// Reject gradients containing NaN or infinity before they hit the wire.
pub(crate) fn check_finite(
    rank: u32,
    iteration: u64,
    gradient: &[f64],
) -> Result<(), CollectiveError> {
    if let Some(index) = gradient.iter().position(|v| !v.is_finite()) {
        return Err(CollectiveError::NonFiniteGradient {
            rank,
            iteration,
            index,
        });
    }
    Ok(())
}

/// Tracks which `(sender, block)` arrivals have landed for each
/// `(iteration, phase)` bucket.
///
/// Workers may run up to one iteration apart, so a poll during one wait can
/// surface arrivals destined for a later bucket; those are recorded here and
/// found already satisfied when their own wait begins.
#[derive(Debug, Default)]
pub(crate) struct ArrivalTracker {
    buckets: HashMap<(u64, Phase), HashSet<(u32, u32)>>,
}

impl ArrivalTracker {
    pub fn record(&mut self, ev: &CompletionEvent) {
        self.buckets
            .entry((ev.iteration, ev.phase))
            .or_default()
            .insert((ev.sender, ev.block_index));
    }

    pub fn contains(&self, iteration: u64, phase: Phase, sender: u32, block: u32) -> bool {
        self.buckets
            .get(&(iteration, phase))
            .is_some_and(|s| s.contains(&(sender, block)))
    }

    /// Forget consumed arrivals so the map stays bounded. Entries not listed
    /// (a ring step waits on one arrival of a bucket that will see more)
    /// survive for later waits.
    pub fn consume(&mut self, iteration: u64, phase: Phase, taken: &[(u32, u32)]) {
        if let Some(bucket) = self.buckets.get_mut(&(iteration, phase)) {
            for pair in taken {
                bucket.remove(pair);
            }
            if bucket.is_empty() {
                self.buckets.remove(&(iteration, phase));
            }
        }
    }
}

/// Block until every `(sender, block)` in `expected` has arrived for
/// `(iteration, phase)`, applying deliveries as they land.
///
/// Returns the payload bytes received for this bucket, summed from the block
/// table. Fires `progress` between poll slices and times out with the list
/// of ranks still missing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn wait_for_arrivals(
    data: &mut dyn DataPlane,
    region: &mut RegisteredRegion,
    tracker: &mut ArrivalTracker,
    iteration: u64,
    phase: Phase,
    expected: &[(u32, u32)],
    blocks: &[BlockRange],
    timeout: Duration,
    progress: &mut Option<Box<dyn FnMut() + Send>>,
) -> Result<PhaseTraffic, CollectiveError> {
    let width = region.width().bytes();
    let start = Instant::now();
    loop {
        if expected
            .iter()
            .all(|&(s, b)| tracker.contains(iteration, phase, s, b))
        {
            let mut traffic = PhaseTraffic::default();
            for &(_, b) in expected {
                traffic.bytes_received += (blocks[b as usize].len * width) as u64;
                traffic.msgs_received += 1;
            }
            tracker.consume(iteration, phase, expected);
            return Ok(traffic);
        }
        if let Some(hook) = progress.as_mut() {
            hook();
        }
        let elapsed = start.elapsed();
        if elapsed >= timeout {
            let missing = expected
                .iter()
                .filter(|&&(s, b)| !tracker.contains(iteration, phase, s, b))
                .map(|&(s, _)| s)
                .collect();
            return Err(CollectiveError::PeerTimeout {
                iteration,
                phase,
                waited: elapsed,
                missing,
            });
        }
        let slice = POLL_SLICE.min(timeout - elapsed);
        for ev in data.poll_completions(region, Some(slice))? {
            tracker.record(&ev);
        }
    }
}
