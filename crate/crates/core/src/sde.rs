//! Euler–Maruyama simulation of the limit diffusion
//! `dV = B(t) g(t, V) dt + β(t) V dt + σ(t) dW` and Monte-Carlo estimates
//! of its finite-horizon cost.
//!
//! Paths are advanced in batches sharing one coefficient interpolation per
//! step. Path `i` draws its noise from stream `i` of the seed, so estimates
//! do not depend on batching or thread count.

use std::io::Write;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::DiffusionCoeffs;
use crate::control::{CostFunctional, Policy};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamRng};
use crate::stats::Stat;

/// Default Euler–Maruyama step.
pub const DEFAULT_SDE_STEP: f64 = 1e-3;

const BATCH: usize = 64;

#[derive(Clone, Debug)]
pub struct SdeOptions {
    pub horizon: f64,
    pub h: f64,
    pub seed: u64,
    pub parallelism: usize,
}

/// One simulated path.
#[derive(Clone, Debug)]
pub struct SdePath {
    pub t_grid: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub dev_cost: f64,
    pub ctrl_cost: f64,
    /// `max_n |V_n · 𝟙|`.
    pub max_ones_drift: f64,
}

impl SdePath {
    pub fn cost(&self) -> f64 {
        self.dev_cost + self.ctrl_cost
    }

    /// CSV with columns `t, v_1, …, v_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for k in 0..self.v.first().map_or(0, |v| v.len()) {
            write!(w, ",v_{}", k + 1)?;
        }
        writeln!(w)?;
        for (t, v) in self.t_grid.iter().zip(&self.v) {
            write!(w, "{t}")?;
            for x in v {
                write!(w, ",{x:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Monte-Carlo estimate of `J(g, v0)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdeEstimate {
    pub n_paths: usize,
    pub h_sde: f64,
    pub horizon: f64,
    pub seed: u64,
    pub dev_cost: Stat,
    pub ctrl_cost: Stat,
    pub total_cost: Stat,
    pub max_ones_drift: f64,
    /// Fraction of feedback evaluations that hit the box.
    pub clamp_frequency: f64,
    #[serde(skip)]
    pub path_costs: Vec<(f64, f64)>,
    #[serde(skip)]
    pub final_states: Vec<Vec<f64>>,
}

impl SdeEstimate {
    pub fn mean(&self) -> f64 {
        self.total_cost.mean
    }

    pub fn stderr(&self) -> f64 {
        self.total_cost.stderr
    }

    pub fn totals(&self) -> Vec<f64> {
        self.path_costs.iter().map(|(a, b)| a + b).collect()
    }
}

struct BatchOut {
    costs: Vec<(f64, f64)>,
    finals: Vec<Vec<f64>>,
    max_ones: f64,
    evals: u64,
    clamps: u64,
    path: Option<SdePath>,
}

fn validate(coeffs: &DiffusionCoeffs, policy: &Policy, v0: &[f64], horizon: f64, h: f64) -> Result<usize> {
    let d = coeffs.d();
    if v0.len() != d {
        return Err(Error::InvalidArgument(format!("v0 has {} entries, d = {d}", v0.len())));
    }
    if v0.iter().sum::<f64>().abs() > 1e-9 {
        return Err(Error::InvalidArgument("v0 must sum to zero".into()));
    }
    if !(h > 0.0) || !(horizon > 0.0) || h > horizon {
        return Err(Error::InvalidArgument(format!("need 0 < h ≤ T, got h = {h}, T = {horizon}")));
    }
    if horizon > coeffs.horizon() + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "T = {horizon} beyond the coefficient grid [0, {}]",
            coeffs.horizon()
        )));
    }
    if let Policy::Feedback(g) = policy {
        if g.control_dim() != coeffs.control_dim() {
            return Err(Error::InvalidArgument(format!(
                "feedback has {} controls, B has {}",
                g.control_dim(),
                coeffs.control_dim()
            )));
        }
    }
    Ok(((horizon / h).round() as usize).max(1))
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    coeffs: &DiffusionCoeffs,
    policy: &Policy,
    cost: &dyn CostFunctional,
    v0: &[f64],
    horizon: f64,
    steps: usize,
    seed: u64,
    first: usize,
    count: usize,
    record: bool,
) -> BatchOut {
    let d = coeffs.d();
    let l = coeffs.control_dim();
    let step = horizon / steps as f64;
    let sq = step.sqrt();
    let feedback = match policy {
        Policy::Feedback(g) => Some(g.as_ref()),
        Policy::Uncontrolled => None,
    };
    let mut rngs: Vec<StreamRng> = (0..count).map(|p| stream_rng(seed, (first + p) as u64)).collect();
    let mut v = DMatrix::from_fn(d, count, |i, _| v0[i]);
    let mut u = DMatrix::zeros(l, count);
    let mut xi = DMatrix::zeros(d, count);
    let mut drift = DMatrix::zeros(d, count);
    let mut beta = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, l);
    let mut sigma = DMatrix::zeros(d, d);
    let mut ucol = vec![0.0; l];
    let mut costs = vec![(0.0, 0.0); count];
    let (mut evals, mut clamps) = (0u64, 0u64);
    let mut max_ones: f64 = 0.0;
    let mut path = record.then(|| SdePath {
        t_grid: vec![0.0],
        v: vec![v0.to_vec()],
        dev_cost: 0.0,
        ctrl_cost: 0.0,
        max_ones_drift: 0.0,
    });

    for n in 0..steps {
        let t = n as f64 * step;
        coeffs.beta.eval_into(t, &mut beta);
        coeffs.sigma.eval_into(t, &mut sigma);
        if feedback.is_some() {
            coeffs.b.eval_into(t, &mut b);
        }
        for p in 0..count {
            let col = v.column(p);
            let y = col.as_slice();
            let dev = cost.state_cost(y);
            let ctrl = match feedback {
                Some(g) => {
                    evals += 1;
                    if g.eval(t, y, &mut ucol) {
                        clamps += 1;
                    }
                    u.column_mut(p).copy_from_slice(&ucol);
                    cost.control_cost(&ucol)
                }
                None => 0.0,
            };
            costs[p].0 += step * dev;
            costs[p].1 += step * ctrl;
            let rng = &mut rngs[p];
            for x in xi.column_mut(p).iter_mut() {
                *x = StandardNormal.sample(rng);
            }
        }
        // V ← V + h(βV + BU) + √h σ ξ
        drift.gemm(1.0, &beta, &v, 0.0);
        v.zip_apply(&drift, |x, y| *x += step * y);
        if feedback.is_some() {
            v.gemm(step, &b, &u, 1.0);
        }
        v.gemm(sq, &sigma, &xi, 1.0);
        for p in 0..count {
            max_ones = max_ones.max(v.column(p).sum().abs());
        }
        if let Some(path) = path.as_mut() {
            path.t_grid.push((n + 1) as f64 * step);
            path.v.push(v.column(0).iter().copied().collect());
        }
    }
    let finals = (0..count).map(|p| v.column(p).iter().copied().collect()).collect();
    if let Some(path) = path.as_mut() {
        path.dev_cost = costs[0].0;
        path.ctrl_cost = costs[0].1;
        path.max_ones_drift = max_ones;
    }
    BatchOut {
        costs,
        finals,
        max_ones,
        evals,
        clamps,
        path,
    }
}

/// Simulates a single path from `v0` (stream 0 of `seed`).
pub fn simulate_sde(
    coeffs: &DiffusionCoeffs,
    policy: &Policy,
    cost: &dyn CostFunctional,
    v0: &[f64],
    horizon: f64,
    h: f64,
    seed: u64,
) -> Result<SdePath> {
    let steps = validate(coeffs, policy, v0, horizon, h)?;
    Ok(run_batch(coeffs, policy, cost, v0, horizon, steps, seed, 0, 1, true)
        .path
        .unwrap())
}

/// Monte-Carlo estimate of the diffusion cost over `n_paths` paths.
pub fn estimate_j(
    coeffs: &DiffusionCoeffs,
    policy: &Policy,
    cost: &dyn CostFunctional,
    v0: &[f64],
    n_paths: usize,
    opts: &SdeOptions,
) -> Result<SdeEstimate> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("n_paths must be at least 2".into()));
    }
    let steps = validate(coeffs, policy, v0, opts.horizon, opts.h)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| Error::Simulation(format!("thread pool: {e}")))?;
    let batches: Vec<(usize, usize)> = (0..n_paths)
        .step_by(BATCH)
        .map(|s| (s, BATCH.min(n_paths - s)))
        .collect();
    let outs: Vec<BatchOut> = pool.install(|| {
        batches
            .par_iter()
            .map(|&(first, count)| {
                run_batch(coeffs, policy, cost, v0, opts.horizon, steps, opts.seed, first, count, false)
            })
            .collect()
    });
    let mut path_costs = Vec::with_capacity(n_paths);
    let mut final_states = Vec::with_capacity(n_paths);
    let (mut evals, mut clamps, mut max_ones) = (0u64, 0u64, 0.0f64);
    for o in outs {
        path_costs.extend(o.costs);
        final_states.extend(o.finals);
        evals += o.evals;
        clamps += o.clamps;
        max_ones = max_ones.max(o.max_ones);
    }
    let dev: Vec<f64> = path_costs.iter().map(|c| c.0).collect();
    let ctrl: Vec<f64> = path_costs.iter().map(|c| c.1).collect();
    let total: Vec<f64> = path_costs.iter().map(|c| c.0 + c.1).collect();
    Ok(SdeEstimate {
        n_paths,
        h_sde: opts.horizon / steps as f64,
        horizon: opts.horizon,
        seed: opts.seed,
        dev_cost: Stat::from_samples(&dev),
        ctrl_cost: Stat::from_samples(&ctrl),
        total_cost: Stat::from_samples(&total),
        max_ones_drift: max_ones,
        clamp_frequency: if evals > 0 { clamps as f64 / evals as f64 } else { 0.0 },
        path_costs,
        final_states,
    })
}
