//! The direct all-reduce: reduce-scatter into per-sender slots, aggregate
//! locally, broadcast the finished block.
//!
//! Worker `m` on an `n`-worker cluster, iteration `ν`:
//!
//! 1. load the gradient into the send buffer;
//! 2. *reduce-scatter*: send block `j` to peer `j` for every `j ≠ m` — it
//!    lands in peer `j`'s receive slot `m`;
//! 3. wait until all `n − 1` partials for block `m` have landed;
//! 4. aggregate slot contents and the own block in ascending rank order,
//!    divide once by `n`; the mean of block `m` now lives in the send buffer;
//! 5. *broadcast*: send block `m` to every peer — it lands in their send
//!    buffers at block `m`'s own offset;
//! 6. wait until every other finished block has landed, then read the whole
//!    send buffer back out as the averaged gradient.
//!
//! Steps 3 and 6 are the only synchronization points: two per iteration, for
//! any cluster size. Because peers may run up to one iteration apart, a poll
//! inside step 3 can already deliver step-5 traffic, and a poll inside
//! step 6 can deliver the *next* iteration's step-2 traffic. Both writes are
//! safe: by then the targeted bytes — the outgoing copy of block `j`, or the
//! receive slot consumed during aggregation — are no longer read.

use std::time::Duration;

use crate::buffers::{BlockRange, ElementWidth, RegisteredRegion};
use crate::transport::{wire, DataMessage, DataPlane, Phase};

use super::{
    check_finite, wait_for_arrivals, ArrivalTracker, Collective, CollectiveError, IterationStats,
    DEFAULT_WAIT_TIMEOUT,
};

pub struct GdraaWorker<D: DataPlane> {
    data: D,
    region: RegisteredRegion,
    tracker: ArrivalTracker,
    timeout: Duration,
    progress: Option<Box<dyn FnMut() + Send>>,
    scratch: Vec<f64>,
}

impl<D: DataPlane> GdraaWorker<D> {
    /// Set up for gradients of `elements` values; the region layout is the
    /// canonical block partition over the data plane's cluster size.
    pub fn new(
        data: D,
        elements: usize,
        width: ElementWidth,
    ) -> Result<Self, CollectiveError> {
        let region = RegisteredRegion::for_collective(elements, data.cluster_size(), width)?;
        let scratch_len = region.blocks()[0].len;
        Ok(GdraaWorker {
            data,
            region,
            tracker: ArrivalTracker::default(),
            timeout: DEFAULT_WAIT_TIMEOUT,
            progress: None,
            scratch: vec![0.0; scratch_len],
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn elements(&self) -> usize {
        self.region.gradient_len()
    }

    pub fn blocks(&self) -> &[BlockRange] {
        self.region.blocks()
    }

    /// Wire bytes this rank sends during reduce-scatter: everything except
    /// its own block.
    pub fn reduce_scatter_send_bytes(&self) -> u64 {
        let width = self.region.width().bytes();
        let own = self.region.blocks()[self.data.rank() as usize].len;
        ((self.region.gradient_len() - own) * width) as u64
    }

    /// Wire bytes this rank sends during broadcast: its finished block to
    /// each of the other `n − 1` workers.
    pub fn broadcast_send_bytes(&self) -> u64 {
        let width = self.region.width().bytes();
        let own = self.region.blocks()[self.data.rank() as usize].len;
        ((self.data.cluster_size() - 1) * own * width) as u64
    }

    fn rank(&self) -> u32 {
        self.data.rank()
    }

    fn n(&self) -> usize {
        self.data.cluster_size()
    }
}

impl<D: DataPlane> Collective for GdraaWorker<D> {
    fn rank(&self) -> u32 {
        self.data.rank()
    }

    fn cluster_size(&self) -> usize {
        self.data.cluster_size()
    }

    fn allreduce(
        &mut self,
        iteration: u64,
        gradient: &mut [f64],
    ) -> Result<IterationStats, CollectiveError> {
        let rank = self.rank();
        let n = self.n();
        let width = self.region.width();
        check_finite(rank, iteration, gradient)?;
        // Narrow the local contribution exactly as the wire will narrow
        // everyone else's, so the aggregate — and therefore every replica —
        // is independent of which rank computed which block.
        width.round_to_wire(gradient);
        self.region.load_gradient(gradient)?;

        let mut stats = IterationStats {
            iteration,
            ..Default::default()
        };
        let blocks = self.region.blocks().to_vec();
        let own_len = blocks[rank as usize].len;

        // Reduce-scatter: block j goes to peer j.
        for peer in 0..n as u32 {
            if peer == rank {
                continue;
            }
            let payload = wire::encode_elements(self.region.sb_block(peer)?, width);
            let receipt = self.data.send_block(
                peer,
                DataMessage {
                    iteration,
                    phase: Phase::ReduceScatter,
                    sender: rank,
                    block_index: peer,
                    payload,
                },
            )?;
            if receipt.suppressed {
                stats.suppressed_sends += 1;
            } else {
                stats.reduce_scatter.bytes_sent += receipt.wire_bytes;
                stats.reduce_scatter.msgs_sent += 1;
            }
        }

        // First synchronization: partials for our block from every peer.
        // An empty block never hits the wire, so those arrivals are closed
        // out as bookkeeping.
        let expected: Vec<(u32, u32)> = if own_len == 0 {
            stats.bookkeeping_arrivals += n as u64 - 1;
            Vec::new()
        } else {
            (0..n as u32).filter(|&r| r != rank).map(|r| (r, rank)).collect()
        };
        let traffic = wait_for_arrivals(
            &mut self.data,
            &mut self.region,
            &mut self.tracker,
            iteration,
            Phase::ReduceScatter,
            &expected,
            &blocks,
            self.timeout,
            &mut self.progress,
        )?;
        stats.reduce_scatter.bytes_received = traffic.bytes_received;
        stats.reduce_scatter.msgs_received = traffic.msgs_received;
        stats.sync_waits += 1;

        // Aggregate ascending by rank; our own contribution sits at
        // position `rank`, straight from the send buffer.
        if own_len > 0 {
            {
                let mut contribs: Vec<&[f64]> = Vec::with_capacity(n);
                for r in 0..n as u32 {
                    if r == rank {
                        contribs.push(self.region.sb_block(rank)?);
                    } else {
                        contribs.push(self.region.recv_slot(r as usize, own_len)?);
                    }
                }
                let (adds, muls) =
                    super::reduce_mean_ascending(&contribs, &mut self.scratch[..own_len]);
                stats.agg_adds = adds;
                stats.agg_muls = muls;
            }
            let own = self.region.sb_block_mut(rank)?;
            own.copy_from_slice(&self.scratch[..own_len]);
            // The copy we keep must match the copy peers decode off the wire.
            width.round_to_wire(own);
        }

        // Broadcast the finished block into everyone's send buffer.
        for peer in 0..n as u32 {
            if peer == rank {
                continue;
            }
            let payload = wire::encode_elements(self.region.sb_block(rank)?, width);
            let receipt = self.data.send_block(
                peer,
                DataMessage {
                    iteration,
                    phase: Phase::Broadcast,
                    sender: rank,
                    block_index: rank,
                    payload,
                },
            )?;
            if receipt.suppressed {
                stats.suppressed_sends += 1;
            } else {
                stats.broadcast.bytes_sent += receipt.wire_bytes;
                stats.broadcast.msgs_sent += 1;
            }
        }

        // Second synchronization: every other finished block.
        let mut expected = Vec::new();
        for r in 0..n as u32 {
            if r == rank {
                continue;
            }
            if blocks[r as usize].len == 0 {
                stats.bookkeeping_arrivals += 1;
            } else {
                expected.push((r, r));
            }
        }
        let traffic = wait_for_arrivals(
            &mut self.data,
            &mut self.region,
            &mut self.tracker,
            iteration,
            Phase::Broadcast,
            &expected,
            &blocks,
            self.timeout,
            &mut self.progress,
        )?;
        stats.broadcast.bytes_received = traffic.bytes_received;
        stats.broadcast.msgs_received = traffic.msgs_received;
        stats.sync_waits += 1;

        self.region.store_gradient(gradient)?;
        Ok(stats)
    }

    fn set_progress_hook(&mut self, hook: Box<dyn FnMut() + Send>) {
        self.progress = Some(hook);
    }
}

impl<D: DataPlane> GdraaWorker<D> {
    /// Transport-level counters (headers, control traffic) beneath the
    /// per-iteration stats.
    pub fn transport_stats(&self) -> crate::transport::TransportStats {
        self.data.stats()
    }
}
