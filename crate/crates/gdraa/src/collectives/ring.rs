//! Ring all-reduce baseline: 2(n−1) neighbour exchanges per iteration.
//!
//! Workers form a ring; worker `m` only ever sends to `(m+1) mod n` and
//! hears from `(m−1) mod n`. The reduce pass circulates partial sums: at
//! step `s`, `m` sends accumulator block `(m−s) mod n` downstream and folds
//! the arriving block `(m−s−1) mod n` into its accumulator. After `n−1`
//! steps `m` holds the complete sum of block `(m+1) mod n`, divides it once
//! by `n`, and the all-gather pass circulates the finished blocks the same
//! way. Every step ends in a synchronization wait, so the ring pays
//! `2(n−1)` waits where the direct strategy pays two.
//!
//! Arrivals for the two passes land in different zones — reduce-pass partials
//! in the receive slot of their *block index*, gathered blocks at the block's
//! own send-buffer offset. The split matters: an upstream neighbour may run a
//! full iteration ahead (its next reduce pass starts while this worker is
//! still gathering), and giving each (pass, block) pair its own landing zone
//! is what keeps those early writes away from bytes not yet consumed.

use std::time::Duration;

use crate::buffers::{block_view, ElementWidth, RecvPlacement, RegisteredRegion};
use crate::transport::{wire, DataMessage, DataPlane, Phase};

use super::{
    check_finite, wait_for_arrivals, ArrivalTracker, Collective, CollectiveError, IterationStats,
    DEFAULT_WAIT_TIMEOUT,
};

pub struct RingWorker<D: DataPlane> {
    data: D,
    region: RegisteredRegion,
    acc: Vec<f64>,
    tracker: ArrivalTracker,
    timeout: Duration,
    progress: Option<Box<dyn FnMut() + Send>>,
}

impl<D: DataPlane> RingWorker<D> {
    pub fn new(data: D, elements: usize, width: ElementWidth) -> Result<Self, CollectiveError> {
        let region = RegisteredRegion::for_collective(elements, data.cluster_size(), width)?
            .with_recv_placement(RecvPlacement::ByBlockIndex);
        Ok(RingWorker {
            data,
            region,
            acc: vec![0.0; elements],
            tracker: ArrivalTracker::default(),
            timeout: DEFAULT_WAIT_TIMEOUT,
            progress: None,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn elements(&self) -> usize {
        self.region.gradient_len()
    }
}

impl<D: DataPlane> Collective for RingWorker<D> {
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
        let m = self.data.rank() as usize;
        let n = self.data.cluster_size();
        check_finite(m as u32, iteration, gradient)?;
        if gradient.len() != self.acc.len() {
            return Err(crate::buffers::BufferError::InvalidArgument(format!(
                "gradient has {} elements, ring worker expects {}",
                gradient.len(),
                self.acc.len()
            ))
            .into());
        }

        let mut stats = IterationStats {
            iteration,
            ..Default::default()
        };
        if n == 1 {
            // Nothing to exchange and dividing by one is the identity, but
            // the result still narrows to the wire width so one replica
            // reports the same bits a cluster would have agreed on.
            self.region.width().round_to_wire(gradient);
            return Ok(stats);
        }

        let blocks = self.region.blocks().to_vec();
        let width = self.region.width();
        let next = ((m + 1) % n) as u32;
        let prev = ((m + n - 1) % n) as u32;
        self.acc.copy_from_slice(gradient);
        // Narrow the local contribution the way the wire narrows everyone
        // else's; replicas must not depend on where a value was computed.
        width.round_to_wire(&mut self.acc);

        // Reduce pass: push the running partials around the ring.
        for s in 0..n - 1 {
            let send_idx = (m + n - s) % n;
            let recv_idx = (m + n - s - 1) % n;

            let payload = wire::encode_elements(block_view(&self.acc, &blocks[send_idx])?, width);
            let receipt = self.data.send_block(
                next,
                DataMessage {
                    iteration,
                    phase: Phase::ReduceScatter,
                    sender: m as u32,
                    block_index: send_idx as u32,
                    payload,
                },
            )?;
            if receipt.suppressed {
                stats.suppressed_sends += 1;
            } else {
                stats.reduce_scatter.bytes_sent += receipt.wire_bytes;
                stats.reduce_scatter.msgs_sent += 1;
            }

            let recv_len = blocks[recv_idx].len;
            if recv_len == 0 {
                stats.bookkeeping_arrivals += 1;
            } else {
                let traffic = wait_for_arrivals(
                    &mut self.data,
                    &mut self.region,
                    &mut self.tracker,
                    iteration,
                    Phase::ReduceScatter,
                    &[(prev, recv_idx as u32)],
                    &blocks,
                    self.timeout,
                    &mut self.progress,
                )?;
                stats.reduce_scatter.bytes_received += traffic.bytes_received;
                stats.reduce_scatter.msgs_received += traffic.msgs_received;
                let incoming = self.region.recv_slot(recv_idx, recv_len)?;
                let offset = blocks[recv_idx].offset;
                for (a, v) in self.acc[offset..offset + recv_len].iter_mut().zip(incoming) {
                    *a += v;
                }
                stats.agg_adds += recv_len as u64;
            }
            stats.sync_waits += 1;
        }

        // The block this worker finished reducing; divide once by n.
        let reduced = (m + 1) % n;
        let r = blocks[reduced];
        if r.len > 0 {
            let inv = 1.0 / n as f64;
            for a in &mut self.acc[r.offset..r.offset + r.len] {
                *a *= inv;
            }
            stats.agg_muls += r.len as u64;
            // The copy we keep must match the copy peers decode off the wire.
            width.round_to_wire(&mut self.acc[r.offset..r.offset + r.len]);
        }

        // All-gather pass: circulate the finished blocks.
        for s in 0..n - 1 {
            let send_idx = (m + 1 + n - s) % n;
            let recv_idx = (m + n - s) % n;

            let payload = wire::encode_elements(block_view(&self.acc, &blocks[send_idx])?, width);
            let receipt = self.data.send_block(
                next,
                DataMessage {
                    iteration,
                    phase: Phase::Broadcast,
                    sender: m as u32,
                    block_index: send_idx as u32,
                    payload,
                },
            )?;
            if receipt.suppressed {
                stats.suppressed_sends += 1;
            } else {
                stats.broadcast.bytes_sent += receipt.wire_bytes;
                stats.broadcast.msgs_sent += 1;
            }

            let recv_len = blocks[recv_idx].len;
            if recv_len == 0 {
                stats.bookkeeping_arrivals += 1;
            } else {
                let traffic = wait_for_arrivals(
                    &mut self.data,
                    &mut self.region,
                    &mut self.tracker,
                    iteration,
                    Phase::Broadcast,
                    &[(prev, recv_idx as u32)],
                    &blocks,
                    self.timeout,
                    &mut self.progress,
                )?;
                stats.broadcast.bytes_received += traffic.bytes_received;
                stats.broadcast.msgs_received += traffic.msgs_received;
                let incoming = self.region.sb_block(recv_idx as u32)?;
                let offset = blocks[recv_idx].offset;
                self.acc[offset..offset + recv_len].copy_from_slice(incoming);
            }
            stats.sync_waits += 1;
        }

        gradient.copy_from_slice(&self.acc);
        Ok(stats)
    }

    fn set_progress_hook(&mut self, hook: Box<dyn FnMut() + Send>) {
        self.progress = Some(hook);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffers::partition;
    use crate::transport::loopback::LoopbackFabric;
    use std::thread;

    fn run_iterations(
        n: usize,
        width: ElementWidth,
        iterations: u64,
        grad_for: impl Fn(usize, u64) -> Vec<f64> + Send + Sync + Copy + 'static,
        elements: usize,
        delay_rank0: Option<Duration>,
    ) -> Vec<Vec<(Vec<f64>, IterationStats)>> {
        let fabric = LoopbackFabric::new(n);
        let mut handles = Vec::new();
        for rank in 0..n {
            let blocks = partition(elements, n).unwrap();
            let data = fabric.data_endpoint(rank as u32, blocks, width);
            handles.push(thread::spawn(move || {
                let mut w = RingWorker::new(data, elements, width).unwrap();
                let mut per_iter = Vec::new();
                for nu in 1..=iterations {
                    if rank == 0 {
                        if let Some(d) = delay_rank0 {
                            thread::sleep(d);
                        }
                    }
                    let mut g = grad_for(rank, nu);
                    let stats = w.allreduce(nu, &mut g).unwrap();
                    per_iter.push((g, stats));
                }
                per_iter
            }));
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    #[test]
    fn ring_of_four_matches_the_mean() {
        let results = run_iterations(
            4,
            ElementWidth::Eight,
            1,
            |rank, _| (0..8).map(|i| (rank * 8 + i) as f64).collect(),
            8,
            None,
        );
        for per_iter in &results {
            let (grad, stats) = &per_iter[0];
            let expected: Vec<f64> = (0..8).map(|i| 12.0 + i as f64).collect();
            assert_eq!(grad, &expected);
            assert_eq!(stats.sync_waits, 6, "one wait per step, 2(n-1) total");
        }
    }

    #[test]
    fn uniform_blocks_split_traffic_evenly_across_passes() {
        // n = 4, 8 elements, 4-byte wire: blocks of 2, so each pass moves
        // 3 × 2 × 4 = 24 bytes per worker, and each worker folds in
        // 8 − 2 = 6 additions then divides its 2 reduced elements.
        let results = run_iterations(
            4,
            ElementWidth::Four,
            1,
            |rank, _| vec![rank as f64; 8],
            8,
            None,
        );
        for per_iter in &results {
            let (grad, stats) = &per_iter[0];
            assert_eq!(grad, &vec![1.5; 8]);
            assert_eq!(stats.reduce_scatter.bytes_sent, 24);
            assert_eq!(stats.broadcast.bytes_sent, 24);
            assert_eq!(stats.reduce_scatter.bytes_received, 24);
            assert_eq!(stats.broadcast.bytes_received, 24);
            assert_eq!(stats.agg_adds, 6);
            assert_eq!(stats.agg_muls, 2);
        }
    }

    #[test]
    fn single_worker_ring_is_identity_with_no_steps() {
        let grad = vec![1.5, -2.25, 1.0e-8];
        let results = run_iterations(
            1,
            ElementWidth::Eight,
            1,
            |_, _| vec![1.5, -2.25, 1.0e-8],
            3,
            None,
        );
        let (out, stats) = &results[0][0];
        assert_eq!(out, &grad);
        assert_eq!(stats.sync_waits, 0);
        assert_eq!(stats.total_bytes_sent(), 0);

        // A 4-byte run narrows even with no steps: same bits a cluster
        // of one would have shipped.
        let results = run_iterations(
            1,
            ElementWidth::Four,
            1,
            |_, _| vec![1.5, -2.25, 1.0e-8],
            3,
            None,
        );
        let (out, _) = &results[0][0];
        let expected: Vec<f64> = grad.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(out, &expected);
    }

    #[test]
    fn empty_tail_block_rides_the_ring_as_bookkeeping() {
        // 3 elements over 4 workers: block 3 is empty. Each pass routes every
        // block through every worker once, so across the cluster the empty
        // block accounts for 2(n−1) suppressed sends and as many bookkeeping
        // arrivals — steps still count as waits.
        let results = run_iterations(
            4,
            ElementWidth::Eight,
            1,
            |rank, _| vec![rank as f64; 3],
            3,
            None,
        );
        let mut suppressed = 0;
        let mut bookkeeping = 0;
        let mut msgs = 0;
        for per_iter in &results {
            let (grad, stats) = &per_iter[0];
            assert_eq!(grad, &vec![1.5; 3]);
            assert_eq!(stats.sync_waits, 6);
            suppressed += stats.suppressed_sends;
            bookkeeping += stats.bookkeeping_arrivals;
            msgs += stats.total_msgs_sent();
        }
        assert_eq!(suppressed, 6);
        assert_eq!(bookkeeping, 6);
        assert_eq!(msgs, 4 * 6 - 6, "every non-empty step sends one message");
    }

    #[test]
    fn stalled_worker_survives_neighbours_running_an_iteration_ahead() {
        // Rank 0 naps before each iteration, so its upstream neighbour's
        // next reduce pass lands in rank 0's receive slots long before rank 0
        // gets there. Three iterations must still all average correctly.
        let results = run_iterations(
            3,
            ElementWidth::Eight,
            3,
            |rank, nu| {
                (0..6)
                    .map(|i| (rank as f64 + 1.0) * (nu as f64) + i as f64)
                    .collect()
            },
            6,
            Some(Duration::from_millis(40)),
        );
        for per_iter in &results {
            for (nu, (grad, _)) in per_iter.iter().enumerate() {
                let nu = (nu + 1) as f64;
                let expected: Vec<f64> = (0..6).map(|i| 2.0 * nu + i as f64).collect();
                assert_eq!(grad, &expected, "iteration {nu}");
            }
        }
    }
}
