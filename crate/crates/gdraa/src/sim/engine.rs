//! Resource-level simulation: every message walks the charged resources in
//! causal order, and worker "threads" advance through the same send/wait
//! structure the real collectives execute.
//!
//! Per phase, sends are first laid out on each sender's NIC in queue order
//! (egress is serialized per NIC), then shared resources — the optional
//! switch, and fan-in links where charged — admit messages ordered by egress
//! start time with sender rank breaking ties. The result is deterministic
//! and independent of any host scheduling.

use crate::buffers::{partition, BufferError, ElementWidth};
use crate::collectives::CollectiveKind;

use super::{ClusterSpec, SimReport};

/// One message queued on a sender's NIC during a phase.
struct Send {
    from: usize,
    to: usize,
    /// When the sending worker enqueued it.
    ready: f64,
    bytes: u64,
}

/// Shared state that persists across phases of one iteration.
struct Fabric<'a> {
    spec: &'a ClusterSpec,
    egress_free: Vec<f64>,
    ingress_free: Vec<f64>,
    /// Nodes whose incoming link serializes fan-in (the parameter server).
    ingress_charged: Vec<bool>,
    switch_free: f64,
    wire_bytes: u64,
    wire_msgs: u64,
}

impl<'a> Fabric<'a> {
    fn new(spec: &'a ClusterSpec, nodes: usize) -> Self {
        Fabric {
            spec,
            egress_free: vec![0.0; nodes],
            ingress_free: vec![0.0; nodes],
            ingress_charged: vec![false; nodes],
            switch_free: 0.0,
            wire_bytes: 0,
            wire_msgs: 0,
        }
    }

    /// Run one phase of sends; returns each message's delivery time, in the
    /// order the sends were given.
    fn run_phase(&mut self, sends: &[Send]) -> Vec<f64> {
        let alpha = self.spec.alpha_s;

        // NIC egress first: per-sender FIFO in queue order.
        let mut egress: Vec<(f64, f64)> = Vec::with_capacity(sends.len());
        for s in sends {
            let start = s.ready.max(self.egress_free[s.from]);
            let end = start + self.spec.serialization_time(s.bytes);
            self.egress_free[s.from] = end;
            egress.push((start, end));
        }

        // Shared resources admit messages in causal order: by egress start,
        // then sender, then queue position.
        let mut order: Vec<usize> = (0..sends.len()).collect();
        order.sort_by(|&a, &b| {
            egress[a]
                .0
                .partial_cmp(&egress[b].0)
                .unwrap()
                .then(sends[a].from.cmp(&sends[b].from))
                .then(a.cmp(&b))
        });

        let mut delivery = vec![0.0; sends.len()];
        for &i in &order {
            let s = &sends[i];
            let (e_start, e_end) = egress[i];
            let mut done = e_end + alpha;
            if let Some(cap) = self.spec.switch_bytes_per_s {
                // The switch forwards cut-through: occupancy can overlap the
                // sender's own serialization but never ends before it.
                let sw_start = e_start.max(self.switch_free);
                let sw_end = sw_start + s.bytes as f64 / cap;
                self.switch_free = sw_end;
                done = done.max(sw_end + alpha);
            }
            if self.ingress_charged[s.to] {
                let in_start = (e_start + alpha).max(self.ingress_free[s.to]);
                let in_end = in_start + self.spec.serialization_time(s.bytes);
                self.ingress_free[s.to] = in_end;
                done = done.max(in_end);
            }
            delivery[i] = done;
            self.wire_bytes += s.bytes;
            self.wire_msgs += 1;
        }
        delivery
    }
}

/// Simulate one iteration of `kind` on `workers` workers.
pub fn simulate(
    kind: CollectiveKind,
    spec: &ClusterSpec,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> Result<SimReport, BufferError> {
    match kind {
        CollectiveKind::Gdraa => simulate_gdraa(spec, workers, elements, width),
        CollectiveKind::Ring => simulate_ring(spec, workers, elements, width),
        CollectiveKind::ParamServer => simulate_ps(spec, workers, elements, width),
    }
}

fn simulate_gdraa(
    spec: &ClusterSpec,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> Result<SimReport, BufferError> {
    let n = workers;
    let blocks = partition(elements, n)?;
    let bytes: Vec<u64> = blocks.iter().map(|b| b.wire_bytes(width) as u64).collect();
    let c = spec.compute_seconds();
    let mut fabric = Fabric::new(spec, n);

    // Reduce-scatter: every worker queues block j to peer j, ascending,
    // skipping itself and empty blocks — exactly the collective's send loop.
    let mut sends = Vec::new();
    for m in 0..n {
        for j in 0..n {
            if j != m && bytes[j] > 0 {
                sends.push(Send {
                    from: m,
                    to: j,
                    ready: c,
                    bytes: bytes[j],
                });
            }
        }
    }
    let delivery = fabric.run_phase(&sends);

    // First wait: all partials for the own block.
    let mut w2 = vec![c; n];
    for (s, d) in sends.iter().zip(&delivery) {
        w2[s.to] = w2[s.to].max(*d);
    }

    // Aggregation: n contributions per element of the own block.
    let agg_end: Vec<f64> = (0..n)
        .map(|m| w2[m] + spec.agg_seconds(n as u64 * blocks[m].len as u64))
        .collect();

    // Broadcast: the finished block to every peer, ascending.
    let mut sends = Vec::new();
    for j in 0..n {
        if bytes[j] == 0 {
            continue;
        }
        for m in 0..n {
            if m != j {
                sends.push(Send {
                    from: j,
                    to: m,
                    ready: agg_end[j],
                    bytes: bytes[j],
                });
            }
        }
    }
    let delivery = fabric.run_phase(&sends);

    // Second wait: every other finished block.
    let mut end = agg_end.clone();
    for (s, d) in sends.iter().zip(&delivery) {
        end[s.to] = end[s.to].max(*d);
    }

    Ok(report(
        CollectiveKind::Gdraa,
        n,
        elements,
        width,
        end,
        &fabric,
        2,
    ))
}

fn simulate_ring(
    spec: &ClusterSpec,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> Result<SimReport, BufferError> {
    let n = workers;
    let blocks = partition(elements, n)?;
    let bytes: Vec<u64> = blocks.iter().map(|b| b.wire_bytes(width) as u64).collect();
    let c = spec.compute_seconds();
    let mut fabric = Fabric::new(spec, n);

    // thread[m] tracks when worker m's control flow reaches its next step.
    let mut thread = vec![c; n];
    if n == 1 {
        return Ok(report(
            CollectiveKind::Ring,
            n,
            elements,
            width,
            thread,
            &fabric,
            0,
        ));
    }

    // Reduce pass: each step every worker forwards one block and folds the
    // arriving one into its accumulator.
    for s in 0..n - 1 {
        let mut sends = Vec::new();
        let mut slot = vec![None; n];
        for m in 0..n {
            let send_idx = (m + n - s) % n;
            if bytes[send_idx] > 0 {
                slot[m] = Some(sends.len());
                sends.push(Send {
                    from: m,
                    to: (m + 1) % n,
                    ready: thread[m],
                    bytes: bytes[send_idx],
                });
            }
        }
        let delivery = fabric.run_phase(&sends);
        let prev_thread = thread.clone();
        for m in 0..n {
            let prev = (m + n - 1) % n;
            let recv_idx = (m + n - s - 1) % n;
            if let Some(i) = slot[prev] {
                // Fold costs one addition per element received.
                thread[m] = prev_thread[m].max(delivery[i])
                    + spec.agg_seconds(blocks[recv_idx].len as u64);
            }
        }
    }

    // Divide the fully reduced block once by n.
    for (m, t) in thread.iter_mut().enumerate() {
        *t += spec.agg_seconds(blocks[(m + 1) % n].len as u64);
    }

    // All-gather pass: circulate the finished blocks.
    for s in 0..n - 1 {
        let mut sends = Vec::new();
        let mut slot = vec![None; n];
        for m in 0..n {
            let send_idx = (m + 1 + n - s) % n;
            if bytes[send_idx] > 0 {
                slot[m] = Some(sends.len());
                sends.push(Send {
                    from: m,
                    to: (m + 1) % n,
                    ready: thread[m],
                    bytes: bytes[send_idx],
                });
            }
        }
        let delivery = fabric.run_phase(&sends);
        let prev_thread = thread.clone();
        for m in 0..n {
            let prev = (m + n - 1) % n;
            if let Some(i) = slot[prev] {
                thread[m] = prev_thread[m].max(delivery[i]);
            }
        }
    }

    Ok(report(
        CollectiveKind::Ring,
        n,
        elements,
        width,
        thread,
        &fabric,
        2 * (n as u64 - 1),
    ))
}

fn simulate_ps(
    spec: &ClusterSpec,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> Result<SimReport, BufferError> {
    let n = workers;
    let gradient_bytes = (elements * width.bytes()) as u64;
    let c = spec.compute_seconds();
    let server = n;
    let mut fabric = Fabric::new(spec, n + 1);
    // The server's shared link is the one place fan-in costs wire time.
    fabric.ingress_charged[server] = true;

    let sends: Vec<Send> = (0..n)
        .map(|m| Send {
            from: m,
            to: server,
            ready: c,
            bytes: gradient_bytes,
        })
        .collect();
    let delivery = fabric.run_phase(&sends);
    let all_in = delivery.iter().fold(c, |a, &d| a.max(d));

    // Server averages n whole gradients, then replies in rank order.
    let agg_done = all_in + spec.agg_seconds(n as u64 * elements as u64);
    let sends: Vec<Send> = (0..n)
        .map(|m| Send {
            from: server,
            to: m,
            ready: agg_done,
            bytes: gradient_bytes,
        })
        .collect();
    let delivery = fabric.run_phase(&sends);

    Ok(report(
        CollectiveKind::ParamServer,
        n,
        elements,
        width,
        delivery,
        &fabric,
        1,
    ))
}

fn report(
    collective: CollectiveKind,
    workers: usize,
    elements: usize,
    width: ElementWidth,
    per_worker_end_s: Vec<f64>,
    fabric: &Fabric,
    sync_waits_per_worker: u64,
) -> SimReport {
    let iteration_time_s = per_worker_end_s.iter().fold(0.0f64, |a, &b| a.max(b));
    SimReport {
        collective,
        workers,
        elements,
        width,
        per_worker_end_s,
        iteration_time_s,
        wire_bytes: fabric.wire_bytes,
        wire_msgs: fabric.wire_msgs,
        sync_waits_per_worker,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ComputeModel;

    fn flat_spec(alpha: f64, beta: f64) -> ClusterSpec {
        ClusterSpec {
            alpha_s: alpha,
            beta_bytes_per_s: beta,
            ..Default::default()
        }
    }

    #[test]
    fn two_worker_exchange_costs_one_gradient_and_two_latencies() {
        // n = 2: each worker scatters half and broadcasts half, so the
        // critical path moves L·w bytes plus one latency per phase.
        let spec = flat_spec(1e-6, 1e9);
        let r = simulate(CollectiveKind::Gdraa, &spec, 2, 250_000_000, ElementWidth::Four)
            .unwrap();
        assert!((r.iteration_time_s - (1.0 + 2e-6)).abs() < 1e-12);
        assert_eq!(r.wire_bytes, 2_000_000_000);
        assert_eq!(r.wire_msgs, 4);
    }

    #[test]
    fn direct_strategy_approaches_two_gradients_but_never_reaches_them() {
        // 2(n−1)/n of the gradient per direction: 1.875 of L·w/β at n = 16.
        let spec = flat_spec(0.0, 1e9);
        let r = simulate(CollectiveKind::Gdraa, &spec, 16, 250_000_000, ElementWidth::Four)
            .unwrap();
        assert!((r.iteration_time_s - 1.875).abs() < 1e-9);
        assert!(r.iteration_time_s <= 2.0);
    }

    #[test]
    fn server_round_trip_scales_with_the_cluster() {
        // Every request and reply crosses the server's single link:
        // 2 · n · L·w/β seconds at n = 16 is a full 32.
        let spec = flat_spec(0.0, 1e9);
        let r = simulate(
            CollectiveKind::ParamServer,
            &spec,
            16,
            250_000_000,
            ElementWidth::Four,
        )
        .unwrap();
        assert!((r.iteration_time_s - 32.0).abs() < 1e-9);
        assert_eq!(r.wire_bytes, 32_000_000_000);
    }

    #[test]
    fn ring_pays_latency_once_per_step() {
        // Tiny payloads expose the latency term: 2(n−1)·α for the ring
        // versus 2·α on the direct path.
        let spec = flat_spec(1e-3, 1e12);
        let ring = simulate(CollectiveKind::Ring, &spec, 8, 8, ElementWidth::Eight).unwrap();
        let direct = simulate(CollectiveKind::Gdraa, &spec, 8, 8, ElementWidth::Eight).unwrap();
        assert!((ring.iteration_time_s - 14e-3).abs() < 1e-6);
        assert!((direct.iteration_time_s - 2e-3).abs() < 1e-6);
    }

    #[test]
    fn compute_shifts_every_strategy_equally() {
        let mut spec = flat_spec(0.0, 1e9);
        spec.compute = ComputeModel::FixedSeconds(3.0);
        for kind in CollectiveKind::ALL {
            let with = simulate(kind, &spec, 4, 1000, ElementWidth::Four).unwrap();
            let without = simulate(kind, &flat_spec(0.0, 1e9), 4, 1000, ElementWidth::Four)
                .unwrap();
            assert!((with.iteration_time_s - without.iteration_time_s - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_worker_collectives_cost_only_compute() {
        let mut spec = flat_spec(1.0, 1.0);
        spec.compute = ComputeModel::FixedSeconds(0.5);
        for kind in [CollectiveKind::Gdraa, CollectiveKind::Ring] {
            let r = simulate(kind, &spec, 1, 100, ElementWidth::Eight).unwrap();
            assert_eq!(r.iteration_time_s, 0.5, "{kind}");
            assert_eq!(r.wire_bytes, 0, "{kind}");
        }
        // The server is a separate node, so even a lone worker pays the
        // round trip: compute + 2(α + 800 bytes at 1 B/s).
        let r = simulate(CollectiveKind::ParamServer, &spec, 1, 100, ElementWidth::Eight)
            .unwrap();
        assert_eq!(r.iteration_time_s, 0.5 + 2.0 * (1.0 + 800.0));
        assert_eq!(r.wire_bytes, 1600);
    }

    #[test]
    fn empty_blocks_send_nothing_in_the_model_either() {
        // 3 elements over 4 workers: the empty tail block must not
        // contribute messages or even latency.
        let spec = flat_spec(1e-6, 1e9);
        let r = simulate(CollectiveKind::Gdraa, &spec, 4, 3, ElementWidth::Four).unwrap();
        // Scatter: each of 3 non-empty blocks from 3 senders; broadcast the
        // same. Rank 3 receives all blocks but owns none.
        assert_eq!(r.wire_msgs, 18);
        assert_eq!(r.wire_bytes, 18 * 4);
    }

    #[test]
    fn shared_switch_serializes_concurrent_flows() {
        // Two workers exchanging halves: with a switch at half the NIC
        // rate, the two concurrent scatter messages serialize through it.
        let mut spec = flat_spec(0.0, 1e9);
        let free = simulate(CollectiveKind::Gdraa, &spec, 2, 2_000_000, ElementWidth::Four)
            .unwrap();
        spec.switch_bytes_per_s = Some(0.5e9);
        let jammed = simulate(CollectiveKind::Gdraa, &spec, 2, 2_000_000, ElementWidth::Four)
            .unwrap();
        assert!(jammed.iteration_time_s > free.iteration_time_s * 1.9);
    }

    #[test]
    fn aggregation_rate_adds_server_time() {
        let mut spec = flat_spec(0.0, 1e9);
        spec.agg_flops_per_s = Some(1e9);
        let with = simulate(CollectiveKind::ParamServer, &spec, 4, 1_000_000, ElementWidth::Four)
            .unwrap();
        spec.agg_flops_per_s = None;
        let without =
            simulate(CollectiveKind::ParamServer, &spec, 4, 1_000_000, ElementWidth::Four)
                .unwrap();
        // 4 × 1e6 operations at 1e9 flop/s = 4 ms on the critical path.
        assert!((with.iteration_time_s - without.iteration_time_s - 4e-3).abs() < 1e-9);
    }
}
