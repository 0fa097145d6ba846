//! Closed-form iteration times, evaluated directly from the block table.
//!
//! These expressions follow the same α–β assumptions as the engine but are
//! written as arithmetic over the schedule rather than simulated resource
//! state, which makes them an independent check: tests assert the two agree
//! to floating-point noise on grids of cluster shapes.
//!
//! For a uniform partition (`n` divides `L`) the direct strategy's general
//! expression collapses to the familiar
//!
//! ```text
//! T = C + 2(n−1)/n · L·w/β + 2α
//! ```
//!
//! — strictly less than two full gradient serializations regardless of `n`,
//! while the parameter server pays `C + 2n · L·w/β + 2α` on its single link
//! and the ring pays the latency term `2(n−1)·α` instead of `2α`.

use crate::buffers::{partition, BufferError, ElementWidth};

use super::ClusterSpec;

/// General direct-strategy iteration time for any block table.
///
/// Mirrors the collective's exact schedule: scatter sends ascending by peer,
/// the partial wait, aggregation, broadcast sends ascending, the final wait.
pub fn gdraa_iteration_time(
    spec: &ClusterSpec,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> Result<f64, BufferError> {
    let n = workers;
    let blocks = partition(elements, n)?;
    let s: Vec<f64> = blocks
        .iter()
        .map(|b| b.wire_bytes(width) as f64)
        .collect();
    let beta = spec.beta_bytes_per_s;
    let alpha = spec.alpha_s;
    let c = spec.compute_seconds();
    if n == 1 {
        // No wire traffic, but the single "aggregation" (the divide by one)
        // is still performed.
        return Ok(c + spec.agg_seconds(elements as u64));
    }

    // Scatter delivery of block j from sender k: everything k queued up to
    // and including block j has left its NIC, plus the wire latency.
    let prefix = |k: usize, j: usize| -> f64 {
        (0..=j).filter(|&x| x != k).map(|x| s[x]).sum::<f64>() / beta
    };

    // First wait: worker j has all partials for its block.
    let w2: Vec<f64> = (0..n)
        .map(|j| {
            if s[j] == 0.0 {
                c
            } else {
                let slowest = (0..n)
                    .filter(|&k| k != j)
                    .map(|k| prefix(k, j))
                    .fold(0.0f64, f64::max);
                c + slowest + alpha
            }
        })
        .collect();

    let agg_end: Vec<f64> = (0..n)
        .map(|j| w2[j] + spec.agg_seconds(n as u64 * blocks[j].len as u64))
        .collect();

    // Broadcast can't start before the NIC drained the scatter queue.
    let nic_free: Vec<f64> = (0..n)
        .map(|m| c + (0..n).filter(|&x| x != m).map(|x| s[x]).sum::<f64>() / beta)
        .collect();

    // Worker m finishes when its own block is aggregated and every peer's
    // finished block has landed; peer j reaches m after q earlier sends.
    let end = (0..n)
        .map(|m| {
            let mut t = agg_end[m];
            for j in 0..n {
                if j == m || s[j] == 0.0 {
                    continue;
                }
                let b_start = agg_end[j].max(nic_free[j]);
                let q = (m + 1 - usize::from(j < m)) as f64;
                t = t.max(b_start + q * s[j] / beta + alpha);
            }
            t
        })
        .fold(0.0f64, f64::max);
    Ok(end)
}

/// Direct-strategy time on a uniform partition (`workers` divides
/// `elements`): `C + 2(n−1)/n · L·w/β + 2α`.
pub fn gdraa_uniform_iteration_time(
    spec: &ClusterSpec,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> f64 {
    assert_eq!(
        elements % workers,
        0,
        "uniform expression needs workers | elements"
    );
    let c = spec.compute_seconds();
    let agg = spec.agg_seconds(workers as u64 * (elements / workers) as u64);
    if workers == 1 {
        return c + agg;
    }
    let n = workers as f64;
    let block_bytes = (elements / workers * width.bytes()) as f64;
    c + 2.0 * (n - 1.0) * block_bytes / spec.beta_bytes_per_s + 2.0 * spec.alpha_s + agg
}

/// Ring time on a uniform partition: `n−1` reduce steps each costing a hop
/// plus a fold, the single divide, then `n−1` gather hops.
pub fn ring_uniform_iteration_time(
    spec: &ClusterSpec,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> f64 {
    assert_eq!(
        elements % workers,
        0,
        "uniform expression needs workers | elements"
    );
    let c = spec.compute_seconds();
    if workers == 1 {
        return c;
    }
    let steps = (workers - 1) as f64;
    let block = elements / workers;
    let hop = spec.alpha_s + (block * width.bytes()) as f64 / spec.beta_bytes_per_s;
    let fold = spec.agg_seconds(block as u64);
    c + steps * (2.0 * hop + fold) + fold
}

/// Parameter-server time: requests and replies serialize on the server's
/// link in both directions.
pub fn ps_iteration_time(
    spec: &ClusterSpec,
    workers: usize,
    elements: usize,
    width: ElementWidth,
) -> f64 {
    let c = spec.compute_seconds();
    if workers == 1 {
        // One request, one reply, no queueing anywhere.
        let g = (elements * width.bytes()) as f64 / spec.beta_bytes_per_s;
        return c + 2.0 * (spec.alpha_s + g) + spec.agg_seconds(elements as u64);
    }
    let n = workers as f64;
    let g = (elements * width.bytes()) as f64 / spec.beta_bytes_per_s;
    let agg = spec.agg_seconds(workers as u64 * elements as u64);
    c + 2.0 * spec.alpha_s + 2.0 * n * g + agg
}
