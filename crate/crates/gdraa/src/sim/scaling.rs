//! Speedup tables: how total training time moves as workers are added.
//!
//! The default regime is weak scaling over a fixed dataset: every worker
//! keeps its per-iteration batch, so `n` workers consume the same samples in
//! `I/n` iterations (kept fractional — the trend, not a ceil staircase) and
//!
//! ```text
//! T(n) = (I / n) · iteration_time(n),    S(n) = T(1) / T(n).
//! ```
//!
//! Strong scaling instead fixes the global batch and iteration count,
//! shrinking each worker's compute share to `C/n`. Either way the iteration
//! time comes from the engine, so every effect it models (latency, NIC
//! serialization, server fan-in) shows up in the curve.

use std::io::Write;

use crate::buffers::{BufferError, ElementWidth};
use crate::collectives::CollectiveKind;

use super::engine::simulate;
use super::{ClusterSpec, ComputeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalingMode {
    #[default]
    Weak,
    Strong,
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub collective: CollectiveKind,
    pub elements: usize,
    pub width: ElementWidth,
    pub spec: ClusterSpec,
    /// Iterations a single worker needs for the whole workload.
    pub baseline_iterations: f64,
    pub mode: ScalingMode,
}

/// One row of the scaling table; serialized as CSV by [`write_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n_workers: usize,
    pub sim_time_s: f64,
    pub speedup: f64,
    pub collective: CollectiveKind,
}

/// Pick a fixed per-iteration compute time so a single worker's simulated
/// total lands on `target_t1_s`. Useful for pinning the model to a measured
/// single-node run before sweeping cluster sizes.
pub fn calibrate_fixed_compute(target_t1_s: f64, baseline_iterations: f64) -> ComputeModel {
    assert!(baseline_iterations > 0.0);
    ComputeModel::FixedSeconds(target_t1_s / baseline_iterations)
}

fn total_time(cfg: &ScalingConfig, n: usize) -> Result<f64, BufferError> {
    let mut spec = cfg.spec.clone();
    let iterations = match cfg.mode {
        ScalingMode::Weak => cfg.baseline_iterations / n as f64,
        ScalingMode::Strong => {
            spec.compute = ComputeModel::FixedSeconds(cfg.spec.compute_seconds() / n as f64);
            cfg.baseline_iterations
        }
    };
    let report = simulate(cfg.collective, &spec, n, cfg.elements, cfg.width)?;
    Ok(iterations * report.iteration_time_s)
}

/// Simulate the workload at each cluster size and report times and speedups
/// relative to one worker.
pub fn scaling_run(cfg: &ScalingConfig, ns: &[usize]) -> Result<Vec<ScalingRow>, BufferError> {
    let t1 = total_time(cfg, 1)?;
    ns.iter()
        .map(|&n| {
            let t = total_time(cfg, n)?;
            Ok(ScalingRow {
                n_workers: n,
                sim_time_s: t,
                speedup: t1 / t,
                collective: cfg.collective,
            })
        })
        .collect()
}

/// Write rows as `n_workers,sim_time_s,speedup,collective`.
pub fn write_csv<W: Write>(rows: &[ScalingRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "n_workers,sim_time_s,speedup,collective")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.9},{:.6},{}",
            r.n_workers, r.sim_time_s, r.speedup, r.collective
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ScalingConfig {
        ScalingConfig {
            collective: CollectiveKind::Gdraa,
            elements: 1_000_000,
            width: ElementWidth::Four,
            spec: ClusterSpec {
                compute: ComputeModel::FixedSeconds(0.05),
                ..Default::default()
            },
            baseline_iterations: 1000.0,
            mode: ScalingMode::Weak,
        }
    }

    #[test]
    fn weak_scaling_is_monotone_when_compute_dominates() {
        // 50 ms of compute against ~0.5 ms of exchange: more workers must
        // never make the job slower.
        let cfg = base_config();
        let ns = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32];
        let rows = scaling_run(&cfg, &ns).unwrap();
        for pair in rows.windows(2) {
            assert!(
                pair[1].sim_time_s <= pair[0].sim_time_s + 1e-12,
                "time rose from n={} ({}) to n={} ({})",
                pair[0].n_workers,
                pair[0].sim_time_s,
                pair[1].n_workers,
                pair[1].sim_time_s
            );
        }
        assert!((rows[0].speedup - 1.0).abs() < 1e-12);
    }

    #[test]
    fn speedup_is_exactly_linear_without_communication() {
        // Zero latency and infinite bandwidth leave only compute, and weak
        // scaling divides it perfectly.
        let mut cfg = base_config();
        cfg.spec.alpha_s = 0.0;
        cfg.spec.beta_bytes_per_s = f64::INFINITY;
        for kind in CollectiveKind::ALL {
            cfg.collective = kind;
            let rows = scaling_run(&cfg, &[1, 2, 4, 8, 16, 32]).unwrap();
            for r in &rows {
                assert!(
                    (r.speedup - r.n_workers as f64).abs() < 1e-12,
                    "{kind}: S({}) = {}",
                    r.n_workers,
                    r.speedup
                );
            }
        }
    }

    #[test]
    fn server_scaling_flattens_while_direct_keeps_climbing() {
        let mut cfg = base_config();
        // Make the exchange matter: 2 ms of compute, megabyte gradients.
        cfg.spec.compute = ComputeModel::FixedSeconds(2e-3);
        let ns = [1, 2, 4, 8, 16, 32];
        cfg.collective = CollectiveKind::Gdraa;
        let direct = scaling_run(&cfg, &ns).unwrap();
        cfg.collective = CollectiveKind::ParamServer;
        let server = scaling_run(&cfg, &ns).unwrap();
        for (d, p) in direct.iter().zip(&server) {
            assert!(d.speedup >= p.speedup - 1e-9);
        }
        // At 32 workers the server's fan-in has eaten most of the gain.
        assert!(direct.last().unwrap().speedup > 2.0 * server.last().unwrap().speedup);
    }

    #[test]
    fn strong_scaling_divides_compute_not_iterations() {
        let mut cfg = base_config();
        cfg.mode = ScalingMode::Strong;
        cfg.spec.alpha_s = 0.0;
        cfg.spec.beta_bytes_per_s = f64::INFINITY;
        let rows = scaling_run(&cfg, &[1, 4]).unwrap();
        assert!((rows[1].speedup - 4.0).abs() < 1e-12);
        // Total time is iterations × per-iteration compute at 1/n.
        assert!((rows[1].sim_time_s - 1000.0 * 0.05 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_hits_the_single_worker_target() {
        let mut cfg = base_config();
        cfg.spec.compute = calibrate_fixed_compute(123.0, cfg.baseline_iterations);
        cfg.spec.alpha_s = 0.0;
        cfg.spec.beta_bytes_per_s = f64::INFINITY;
        let rows = scaling_run(&cfg, &[1]).unwrap();
        assert!((rows[0].sim_time_s - 123.0).abs() < 1e-9);
    }

    #[test]
    fn csv_layout_is_stable() {
        let rows = vec![
            ScalingRow {
                n_workers: 1,
                sim_time_s: 50.0,
                speedup: 1.0,
                collective: CollectiveKind::Gdraa,
            },
            ScalingRow {
                n_workers: 4,
                sim_time_s: 12.5,
                speedup: 4.0,
                collective: CollectiveKind::Gdraa,
            },
        ];
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n_workers,sim_time_s,speedup,collective");
        assert_eq!(lines.next().unwrap(), "1,50.000000000,1.000000,gdraa");
        assert_eq!(lines.next().unwrap(), "4,12.500000000,4.000000,gdraa");
    }
}
