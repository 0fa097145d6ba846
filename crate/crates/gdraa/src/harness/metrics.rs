//! Scaling and efficiency metrics for training runs.

/// Price/performance of a run: the reciprocal of time × processor count.
/// Lower time or fewer processors both raise it; doubling the processors
/// while halving the time leaves it unchanged.
pub fn compute_pcr(time_s: f64, processors: u64) -> f64 {
    1.0 / (time_s * processors as f64)
}

/// Speedup of a run against the baseline: `t_base / t`.
pub fn speedup(t_base: f64, t: f64) -> f64 {
    t_base / t
}

/// A scaling-table row whose claimed speedup disagrees with the one
/// recomputed from its times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupMismatch {
    pub index: usize,
    pub claimed: f64,
    pub recomputed: f64,
}

/// Recompute speedups from `(time, claimed_speedup)` rows against the
/// baseline time and flag every claim that is off by at least `tolerance`
/// (0.005 checks agreement at two decimal places).
pub fn audit_speedups(
    t_base: f64,
    rows: &[(f64, f64)],
    tolerance: f64,
) -> Vec<SpeedupMismatch> {
    rows.iter()
        .enumerate()
        .filter_map(|(index, &(t, claimed))| {
            let recomputed = speedup(t_base, t);
            if (claimed - recomputed).abs() >= tolerance {
                Some(SpeedupMismatch {
                    index,
                    claimed,
                    recomputed,
                })
            } else {
                None
            }
        })
        .collect()
}
