//! Pathwise cost integrals of a simulated trajectory.
//!
//! Between events the integer state is frozen but `V_N(s) = √N(μ_N - μ(s))`
//! still moves with the fluid path, so each inter-event interval is split on
//! a grid of step `quad_step` and integrated by the trapezoid rule.

use crate::control::{CostFunctional, FeedbackLaw, Policy};
use crate::fluid::FluidPath;

/// Default quadrature step for cost integrals.
pub const DEFAULT_QUAD_STEP: f64 = 0.01;

/// Online accumulator fed with constant-state segments.
pub struct CostAccumulator<'a> {
    fluid: &'a FluidPath,
    feedback: Option<&'a dyn FeedbackLaw>,
    cost: &'a dyn CostFunctional,
    n: f64,
    sqrt_n: f64,
    quad_step: f64,
    mu: Vec<f64>,
    mu_time: f64,
    v: Vec<f64>,
    u: Vec<f64>,
    pub dev_cost: f64,
    pub ctrl_cost: f64,
    /// Feedback evaluations made for the control cost.
    pub control_evals: u64,
    /// ... of which hit the box boundary.
    pub clamp_events: u64,
    /// `sup_t ‖μ_N(t) - μ(t)‖₁` over evaluated knots.
    pub sup_l1_error: f64,
}

impl<'a> CostAccumulator<'a> {
    pub fn new(
        fluid: &'a FluidPath,
        policy: &'a Policy,
        cost: &'a dyn CostFunctional,
        n: usize,
        quad_step: f64,
    ) -> Self {
        let d = fluid.d();
        let feedback = match policy {
            Policy::Uncontrolled => None,
            Policy::Feedback(g) => Some(g.as_ref()),
        };
        let dim = feedback.map_or(0, |g| g.control_dim());
        Self {
            fluid,
            feedback,
            cost,
            n: n as f64,
            sqrt_n: (n as f64).sqrt(),
            quad_step,
            mu: vec![0.0; d],
            mu_time: f64::NAN,
            v: vec![0.0; d],
            u: vec![0.0; dim],
            dev_cost: 0.0,
            ctrl_cost: 0.0,
            control_evals: 0,
            clamp_events: 0,
            sup_l1_error: 0.0,
        }
    }

    /// Running cost `(k_1(V), k_2(g))` at time `t` in state `counts`.
    fn running(&mut self, t: f64, counts: &[i64]) -> (f64, f64) {
        if t != self.mu_time {
            self.fluid.eval_into(t, &mut self.mu);
            self.mu_time = t;
        }
        let mut l1 = 0.0;
        for k in 0..self.v.len() {
            let diff = counts[k] as f64 / self.n - self.mu[k];
            l1 += diff.abs();
            self.v[k] = self.sqrt_n * diff;
        }
        if l1 > self.sup_l1_error {
            self.sup_l1_error = l1;
        }
        let dev = self.cost.state_cost(&self.v);
        let ctrl = match self.feedback {
            Some(g) => {
                self.control_evals += 1;
                if g.eval(t, &self.v, &mut self.u) {
                    self.clamp_events += 1;
                }
                self.cost.control_cost(&self.u)
            }
            None => 0.0,
        };
        (dev, ctrl)
    }

    /// Integrates over `[t0, t1]` with the state frozen at `counts`.
    pub fn segment(&mut self, t0: f64, t1: f64, counts: &[i64]) {
        if !(t1 > t0) {
            return;
        }
        let (mut prev_t, (mut prev_dev, mut prev_ctrl)) = (t0, self.running(t0, counts));
        let mut k = (t0 / self.quad_step).floor() + 1.0;
        loop {
            let knot = k * self.quad_step;
            let t = if knot < t1 { knot } else { t1 };
            let (dev, ctrl) = self.running(t, counts);
            let w = 0.5 * (t - prev_t);
            self.dev_cost += w * (prev_dev + dev);
            self.ctrl_cost += w * (prev_ctrl + ctrl);
            if t >= t1 {
                break;
            }
            prev_t = t;
            prev_dev = dev;
            prev_ctrl = ctrl;
            k += 1.0;
        }
    }
}

/// Replays a recorded event log and returns `(dev_cost, ctrl_cost)`.
///
/// `events` holds `(time, transition shift)` pairs in time order, starting
/// from `initial_counts` at time 0 and running to `horizon`.
pub fn accumulate_cost(
    initial_counts: &[i64],
    events: &[(f64, Vec<(usize, i32)>)],
    horizon: f64,
    fluid: &FluidPath,
    policy: &Policy,
    cost: &dyn CostFunctional,
    quad_step: f64,
) -> (f64, f64) {
    let n: i64 = initial_counts.iter().sum();
    let mut acc = CostAccumulator::new(fluid, policy, cost, n as usize, quad_step);
    let mut counts = initial_counts.to_vec();
    let mut t_last = 0.0;
    for (t, shift) in events {
        let t = t.min(horizon);
        acc.segment(t_last, t, &counts);
        for &(m, s) in shift {
            counts[m] += s as i64;
        }
        t_last = t;
    }
    acc.segment(t_last, horizon, &counts);
    (acc.dev_cost, acc.ctrl_cost)
}
