//! Complexity benchmark: counted FLOPs vs sequence length, with
//! optional wall-clock medians.
//!
//! Acceptance of the sub-quadratic scaling claim binds to the counted
//! FLOPs; wall-clock numbers are informative only and can be skipped
//! by requesting zero repetitions.

use crate::accounting::count_flops;
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::head::transition_table;
use crate::params::ParameterStore;
use crate::synth::{gen_sequence, make_sample, SceneSpec};
use serde::Serialize;
use std::time::Instant;

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub flops: u64,
    pub flops_per_n: u64,
    /// Median forward wall time; absent when timing was skipped.
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log(flops) against log(n).
    pub exponent: f64,
    pub r2: f64,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,flops,flops_per_n,wall_ms_median\n");
        for row in &self.rows {
            let wall = row.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", row.n, row.flops, row.flops_per_n, wall));
        }
        out.push_str(&format!("# fitted_exponent={:.4} r2={:.6}\n", self.exponent, self.r2));
        out
    }
}

/// Ordinary least squares in log-log space: returns (slope, r^2).
pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(CoreError::contract("fit needs >= 2 matched points"));
    }
    if xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(CoreError::contract("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, r2))
}

/// Count FLOPs (and optionally time the forward pass) for each
/// sequence length. `timing_reps = 0` skips wall-clock measurement;
/// otherwise the median of `timing_reps` runs after one warmup is
/// reported. Timed runs are single-threaded.
pub fn run_scaling(cfg: &ModelConfig, n_list: &[usize], timing_reps: usize) -> Result<ScalingReport> {
    cfg.validate()?;
    if n_list.len() < 3 {
        return Err(CoreError::contract(format!(
            "need at least 3 sequence lengths, got {}",
            n_list.len()
        )));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::contract("sequence lengths must be strictly increasing"));
    }
    if cfg.use_frame_embedding {
        return Err(CoreError::contract(
            "scaling benchmark requires use_frame_embedding = false",
        ));
    }

    let store = ParameterStore::init(cfg, 0x5eed)?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let counted = count_flops(cfg, n);
        let wall_ms = if timing_reps > 0 {
            let spec = SceneSpec {
                objects: cfg.proposals.min(4),
                feat_dim: cfg.feat_dim,
                proposals: cfg.proposals,
                drift_step: 0.5,
                noise_sigma: 0.1,
                background_scale: 0.25,
                seed: n as u64,
            };
            let sample = make_sample(gen_sequence(&spec, n, 0)?, 1)?;
            transition_table(&sample, &store, cfg)?; // warmup
            let mut times = Vec::with_capacity(timing_reps);
            for _ in 0..timing_reps {
                let t0 = Instant::now();
                let table = transition_table(&sample, &store, cfg)?;
                let elapsed = t0.elapsed().as_secs_f64() * 1e3;
                debug_assert!(!table.is_empty());
                times.push(elapsed);
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Some(times[times.len() / 2])
        } else {
            None
        };
        rows.push(ScalingRow {
            n,
            flops: counted.total,
            flops_per_n: counted.total / n as u64,
            wall_ms,
        });
    }

    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.flops as f64).collect();
    let (exponent, r2) = fit_log_log(&xs, &ys)?;
    Ok(ScalingReport { rows, exponent, r2 })
}
