//! Parallel, bit-reproducible Monte-Carlo over independent trajectories.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate_trajectory, EventKernel, SimOptions, TrajectoryRecord};
use crate::control::{CostFunctional, Policy};
use crate::error::{Error, Result};
use crate::fluid::FluidPath;
use crate::rng::stream_rng;
use crate::stats::Stat;

#[derive(Clone, Debug)]
pub struct TrialsConfig {
    pub n_trials: usize,
    pub master_seed: u64,
    pub parallelism: usize,
    pub sim: SimOptions,
    /// Hash of the experiment configuration, copied into the summary.
    pub config_hash: String,
}

/// Per-trial costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub dev_cost: f64,
    pub ctrl_cost: f64,
    pub total: f64,
}

/// Aggregated statistics over all trials of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_trials: usize,
    pub n: usize,
    pub horizon: f64,
    pub dev_cost: Stat,
    pub ctrl_cost: Stat,
    pub total_cost: Stat,
    pub clamp_frequency: f64,
    pub proposed_events: u64,
    pub accepted_events: u64,
    pub max_acceptance_ratio: f64,
    pub master_seed: u64,
    pub config_hash: String,
    pub version: String,
}

pub struct TrialRun {
    pub records: Vec<TrajectoryRecord>,
    pub summary: RunSummary,
    pub wall_clock_secs: f64,
}

impl TrialRun {
    pub fn outcomes(&self) -> Vec<TrialOutcome> {
        self.records
            .iter()
            .enumerate()
            .map(|(trial, r)| TrialOutcome {
                trial,
                dev_cost: r.dev_cost,
                ctrl_cost: r.ctrl_cost,
                total: r.total_cost(),
            })
            .collect()
    }

    /// CSV with columns `trial, dev_cost, ctrl_cost, total`.
    pub fn write_trials_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "trial,dev_cost,ctrl_cost,total")?;
        for o in self.outcomes() {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e}",
                o.trial, o.dev_cost, o.ctrl_cost, o.total
            )?;
        }
        Ok(())
    }
}

/// Runs `n_trials` trajectories; trial `i` draws from stream `i` of the
/// master seed, so the summary does not depend on `parallelism`.
pub fn run_trials<K: EventKernel>(
    kernel: &K,
    fluid: &FluidPath,
    initial_counts: &[i64],
    policy: &Policy,
    cost: &dyn CostFunctional,
    cfg: &TrialsConfig,
) -> Result<TrialRun> {
    if cfg.n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .map_err(|e| Error::Simulation(format!("thread pool: {e}")))?;
    let records: Vec<TrajectoryRecord> = pool.install(|| {
        (0..cfg.n_trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = stream_rng(cfg.master_seed, trial as u64);
                simulate_trajectory(
                    kernel,
                    fluid,
                    initial_counts,
                    policy,
                    cost,
                    &cfg.sim,
                    trial as u64,
                    &mut rng,
                )
                .map_err(|e| Error::Trial {
                    trial,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = summarize(&records, kernel.population(), cfg);
    Ok(TrialRun {
        records,
        summary,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn summarize(records: &[TrajectoryRecord], n: usize, cfg: &TrialsConfig) -> RunSummary {
    let dev: Vec<f64> = records.iter().map(|r| r.dev_cost).collect();
    let ctrl: Vec<f64> = records.iter().map(|r| r.ctrl_cost).collect();
    let total: Vec<f64> = records.iter().map(|r| r.dev_cost + r.ctrl_cost).collect();
    let evals: u64 = records.iter().map(|r| r.control_evals).sum();
    let clamps: u64 = records.iter().map(|r| r.clamp_events).sum();
    RunSummary {
        n_trials: records.len(),
        n,
        horizon: cfg.sim.horizon,
        dev_cost: Stat::from_samples(&dev),
        ctrl_cost: Stat::from_samples(&ctrl),
        total_cost: Stat::from_samples(&total),
        clamp_frequency: if evals == 0 { 0.0 } else { clamps as f64 / evals as f64 },
        proposed_events: records.iter().map(|r| r.proposed).sum(),
        accepted_events: records.iter().map(|r| r.accepted).sum(),
        max_acceptance_ratio: records.iter().map(|r| r.max_ratio).fold(0.0, f64::max),
        master_seed: cfg.master_seed,
        config_hash: cfg.config_hash.clone(),
        version: crate::VERSION.to_string(),
    }
}
