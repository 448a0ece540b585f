//! Event-driven simulation of the `N`-particle empirical-measure chain.
//!
//! Candidates arrive at the total bound rate and are accepted with
//! probability `Γ_N(r, g(t, V_N(t)), ν) / bound`, where `V_N(t)` uses the
//! interpolated fluid path at the candidate time. This simulates the
//! feedback-controlled chain exactly in distribution; only control-affected
//! transitions ever need the acceptance test.

mod cost;
mod kernel;
mod trials;

pub use cost::{accumulate_cost, CostAccumulator, DEFAULT_QUAD_STEP};
pub use kernel::{Candidate, EventKernel, GenericKernel, GenericScratch};
pub use trials::{run_trials, RunSummary, TrialOutcome, TrialRun, TrialsConfig};

use rand::Rng;
use rand_distr::Exp1;

use crate::control::{CostFunctional, Policy};
use crate::error::{Error, Result};
use crate::fluid::FluidPath;

/// Slack allowed on acceptance ratios before a bound violation is reported.
pub const RATIO_SLACK: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub horizon: f64,
    pub quad_step: f64,
    pub record_events: bool,
}

impl SimOptions {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            quad_step: DEFAULT_QUAD_STEP,
            record_events: false,
        }
    }
}

/// One simulated path of the empirical measure.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub n: usize,
    pub stream: u64,
    pub proposed: u64,
    pub accepted: u64,
    pub initial_counts: Vec<i64>,
    pub final_counts: Vec<i64>,
    /// `∫ k_1(V_N(s)) ds`.
    pub dev_cost: f64,
    /// `∫ k_2(√N U^N(s)) ds`.
    pub ctrl_cost: f64,
    /// Feedback evaluations, at candidates and quadrature knots.
    pub control_evals: u64,
    pub clamp_events: u64,
    pub sup_l1_error: f64,
    pub max_ratio: f64,
    /// `V_N(T)`.
    pub v_final: Vec<f64>,
    /// `(time, transition id)` of accepted events when recording is on.
    pub events: Option<Vec<(f64, u32)>>,
}

impl TrajectoryRecord {
    pub fn total_cost(&self) -> f64 {
        self.dev_cost + self.ctrl_cost
    }

    /// Piecewise-constant path `(t, N μ_N(t))` rebuilt from the event log.
    pub fn path<K: EventKernel>(&self, kernel: &K) -> Option<Vec<(f64, Vec<i64>)>> {
        let events = self.events.as_ref()?;
        let mut counts = self.initial_counts.clone();
        let mut out = vec![(0.0, counts.clone())];
        for &(t, id) in events {
            for &(m, s) in kernel.shift(id as usize) {
                counts[m] += s as i64;
            }
            out.push((t, counts.clone()));
        }
        Some(out)
    }
}

/// Simulates one trajectory on `[0, T]` from `initial_counts`.
pub fn simulate_trajectory<K: EventKernel, R: Rng + ?Sized>(
    kernel: &K,
    fluid: &FluidPath,
    initial_counts: &[i64],
    policy: &Policy,
    cost: &dyn CostFunctional,
    opts: &SimOptions,
    stream: u64,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    let d = kernel.dim();
    let n = kernel.population();
    if initial_counts.len() != d {
        return Err(Error::InvalidArgument(format!(
            "initial state has {} entries, d = {d}",
            initial_counts.len()
        )));
    }
    if initial_counts.iter().any(|&c| c < 0) || initial_counts.iter().sum::<i64>() != n as i64 {
        return Err(Error::InvalidArgument(format!(
            "initial counts {initial_counts:?} are not a point of S_N with N = {n}"
        )));
    }
    if !(opts.horizon >= 0.0) || opts.horizon > fluid.horizon() + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "horizon {} not covered by the fluid path on [0, {}]",
            opts.horizon,
            fluid.horizon()
        )));
    }
    if !(opts.quad_step > 0.0) {
        return Err(Error::InvalidArgument("quad_step must be positive".into()));
    }
    if policy.is_controlled() != kernel.controlled() {
        return Err(Error::InvalidArgument(
            "controlled policies need a kernel with box-supremum bounds, and vice versa".into(),
        ));
    }
    let feedback = match policy {
        Policy::Feedback(g) => Some(g.as_ref()),
        Policy::Uncontrolled => None,
    };
    let nf = n as f64;
    let sqrt_n = nf.sqrt();
    let horizon = opts.horizon;

    let mut counts = initial_counts.to_vec();
    let mut scratch = kernel.new_scratch();
    let mut acc = CostAccumulator::new(fluid, policy, cost, n, opts.quad_step);
    let mut mu = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut u = vec![0.0; feedback.map_or(0, |g| g.control_dim())];
    let mut events = opts.record_events.then(Vec::new);

    let (mut proposed, mut accepted) = (0u64, 0u64);
    let (mut cand_evals, mut cand_clamps) = (0u64, 0u64);
    let mut max_ratio: f64 = 0.0;
    let mut t = 0.0;
    let mut t_last = 0.0;
    let mut total = kernel.refresh(&mut scratch, &counts);

    while total > 0.0 {
        let dt: f64 = rng.sample::<f64, _>(Exp1) / total;
        t += dt;
        if t >= horizon {
            break;
        }
        proposed += 1;
        let cand = kernel.propose(&scratch, &counts, rng);
        let accept = match feedback {
            None => true,
            Some(g) => {
                fluid.eval_into(t, &mut mu);
                for k in 0..d {
                    v[k] = sqrt_n * (counts[k] as f64 / nf - mu[k]);
                }
                let clamped = g.eval(t, &v, &mut u);
                match kernel.controlled_rate(&counts, cand.id, &u) {
                    None => true,
                    Some(rate) => {
                        cand_evals += 1;
                        if clamped {
                            cand_clamps += 1;
                        }
                        let ratio = rate / cand.bound;
                        max_ratio = max_ratio.max(ratio);
                        if !(ratio <= 1.0 + RATIO_SLACK) {
                            return Err(Error::Simulation(format!(
                                "thinning bound violated: ratio {ratio} for transition {} at t = {t}",
                                cand.id
                            )));
                        }
                        rng.random::<f64>() < ratio
                    }
                }
            }
        };
        if !accept {
            continue;
        }
        if feedback.is_none() {
            max_ratio = 1.0;
        }
        acc.segment(t_last, t, &counts);
        for &(m, s) in kernel.shift(cand.id) {
            counts[m] += s as i64;
            if counts[m] < 0 {
                return Err(Error::Simulation(format!(
                    "state {m} went negative after transition {} at t = {t}; \
                     its rate does not vanish on an empty source",
                    cand.id
                )));
            }
        }
        if let Some(ev) = events.as_mut() {
            ev.push((t, cand.id as u32));
        }
        accepted += 1;
        t_last = t;
        total = kernel.refresh(&mut scratch, &counts);
    }
    acc.segment(t_last, horizon, &counts);

    fluid.eval_into(horizon, &mut mu);
    let v_final = (0..d)
        .map(|k| sqrt_n * (counts[k] as f64 / nf - mu[k]))
        .collect();

    Ok(TrajectoryRecord {
        n,
        stream,
        proposed,
        accepted,
        initial_counts: initial_counts.to_vec(),
        final_counts: counts,
        dev_cost: acc.dev_cost,
        ctrl_cost: acc.ctrl_cost,
        control_evals: acc.control_evals + cand_evals,
        clamp_events: acc.clamp_events + cand_clamps,
        sup_l1_error: acc.sup_l1_error,
        max_ratio,
        v_final,
        events,
    })
}
