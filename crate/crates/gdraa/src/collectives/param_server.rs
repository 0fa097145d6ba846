//! Parameter-server baseline: a central aggregator instead of a collective.
//!
//! The server joins the data plane as one extra endpoint (rank `n` on an
//! `n`-worker cluster). Each iteration every worker ships its *entire*
//! gradient to the server and blocks until the averaged gradient comes back,
//! so the server's NIC absorbs `n × L × width` bytes of requests and emits
//! the same again in replies — the congestion point the distributed
//! strategies exist to avoid.
//!
//! Requests travel as reduce-phase messages and land in the server's receive
//! slot for the sending worker; replies travel as broadcast-phase messages
//! and land at the worker's send buffer. The server aggregates in ascending
//! rank order and divides once, bitwise identical to the direct strategy's
//! per-block aggregation.

use std::time::Duration;

use crate::buffers::{partition, ElementWidth, RegisteredRegion};
use crate::transport::{wire, DataMessage, DataPlane, Phase};

use super::{
    check_finite, wait_for_arrivals, ArrivalTracker, Collective, CollectiveError, IterationStats,
    DEFAULT_WAIT_TIMEOUT,
};

/// Rank the server occupies on a cluster of `workers` workers.
pub fn server_rank(workers: usize) -> u32 {
    workers as u32
}

pub struct PsWorker<D: DataPlane> {
    data: D,
    region: RegisteredRegion,
    tracker: ArrivalTracker,
    timeout: Duration,
    progress: Option<Box<dyn FnMut() + Send>>,
    server: u32,
}

impl<D: DataPlane> PsWorker<D> {
    /// `data` must be an endpoint on a fabric of `workers + 1` nodes, the
    /// last of which runs [`PsServer`].
    pub fn new(data: D, elements: usize, width: ElementWidth) -> Result<Self, CollectiveError> {
        let workers = data.cluster_size() - 1;
        assert!(workers > 0, "need at least one worker besides the server");
        assert!(
            (data.rank() as usize) < workers,
            "rank {} is the server's seat on a {}-worker cluster",
            data.rank(),
            workers
        );
        // The whole gradient moves as one block; the reply lands over it.
        let region = RegisteredRegion::new(partition(elements, 1)?, 1, width)?;
        Ok(PsWorker {
            data,
            region,
            tracker: ArrivalTracker::default(),
            timeout: DEFAULT_WAIT_TIMEOUT,
            progress: None,
            server: server_rank(workers),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl<D: DataPlane> Collective for PsWorker<D> {
    fn rank(&self) -> u32 {
        self.data.rank()
    }

    fn cluster_size(&self) -> usize {
        // Worker seats only; the server is infrastructure, not a peer.
        self.data.cluster_size() - 1
    }

    fn allreduce(
        &mut self,
        iteration: u64,
        gradient: &mut [f64],
    ) -> Result<IterationStats, CollectiveError> {
        let rank = self.data.rank();
        check_finite(rank, iteration, gradient)?;
        let mut stats = IterationStats {
            iteration,
            ..Default::default()
        };
        let width = self.region.width();
        let blocks = self.region.blocks().to_vec();

        let payload = wire::encode_elements(gradient, width);
        let receipt = self.data.send_block(
            self.server,
            DataMessage {
                iteration,
                phase: Phase::ReduceScatter,
                sender: rank,
                block_index: 0,
                payload,
            },
        )?;
        stats.reduce_scatter.bytes_sent += receipt.wire_bytes;
        stats.reduce_scatter.msgs_sent += 1;

        let traffic = wait_for_arrivals(
            &mut self.data,
            &mut self.region,
            &mut self.tracker,
            iteration,
            Phase::Broadcast,
            &[(self.server, 0)],
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

/// Totals the server accumulates over the iterations it serves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PsServerTotals {
    pub iterations: u64,
    pub ingress_bytes: u64,
    pub egress_bytes: u64,
    pub agg_adds: u64,
    pub agg_muls: u64,
}

pub struct PsServer<D: DataPlane> {
    data: D,
    region: RegisteredRegion,
    tracker: ArrivalTracker,
    timeout: Duration,
    workers: usize,
    scratch: Vec<f64>,
    totals: PsServerTotals,
}

impl<D: DataPlane> PsServer<D> {
    pub fn new(data: D, elements: usize, width: ElementWidth) -> Result<Self, CollectiveError> {
        let workers = data.cluster_size() - 1;
        assert_eq!(
            data.rank(),
            server_rank(workers),
            "the server must sit at the cluster's last rank"
        );
        // One slot per worker, each big enough for a whole gradient.
        let region = RegisteredRegion::new(partition(elements, 1)?, workers, width)?;
        Ok(PsServer {
            data,
            region,
            tracker: ArrivalTracker::default(),
            timeout: DEFAULT_WAIT_TIMEOUT,
            workers,
            scratch: vec![0.0; elements],
            totals: PsServerTotals::default(),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn totals(&self) -> PsServerTotals {
        self.totals
    }

    /// Collect all requests for `iteration`, average them, reply to everyone.
    pub fn serve_iteration(&mut self, iteration: u64) -> Result<(), CollectiveError> {
        let elements = self.region.gradient_len();
        let width = self.region.width();
        let blocks = self.region.blocks().to_vec();
        let expected: Vec<(u32, u32)> = (0..self.workers as u32).map(|w| (w, 0)).collect();

        let traffic = wait_for_arrivals(
            &mut self.data,
            &mut self.region,
            &mut self.tracker,
            iteration,
            Phase::ReduceScatter,
            &expected,
            &blocks,
            self.timeout,
            &mut None,
        )?;
        self.totals.ingress_bytes += traffic.bytes_received;

        {
            let contribs: Vec<&[f64]> = (0..self.workers)
                .map(|w| self.region.recv_slot(w, elements))
                .collect::<Result<_, _>>()?;
            let (adds, muls) = super::reduce_mean_ascending(&contribs, &mut self.scratch);
            self.totals.agg_adds += adds;
            self.totals.agg_muls += muls;
        }

        for w in 0..self.workers as u32 {
            let receipt = self.data.send_block(
                w,
                DataMessage {
                    iteration,
                    phase: Phase::Broadcast,
                    sender: self.data.rank(),
                    block_index: 0,
                    payload: wire::encode_elements(&self.scratch, width),
                },
            )?;
            self.totals.egress_bytes += receipt.wire_bytes;
        }
        self.totals.iterations += 1;
        Ok(())
    }

    /// Serve iterations `first..=last` in order.
    pub fn serve(&mut self, first: u64, last: u64) -> Result<PsServerTotals, CollectiveError> {
        for nu in first..=last {
            self.serve_iteration(nu)?;
        }
        Ok(self.totals)
    }
}
