//! Law-of-large-numbers limit `μ̇ = F(μ)` of the empirical measure.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{check_simplex, ModelSpec};

/// Default fluid step for horizons up to 10.
pub const DEFAULT_FLUID_STEP: f64 = 1e-3;

/// `F(r) = Σ_k Σ_ν Γ^k(r, ν) e_ν`, written into `out`.
pub fn drift_into(spec: &ModelSpec, r: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (id, tr) in spec.transitions().iter().enumerate() {
        let rate = spec.base_rate_unchecked(r, id);
        if rate != 0.0 {
            for &(m, s) in &tr.sparse {
                out[m] += rate * s as f64;
            }
        }
    }
}

pub fn drift(spec: &ModelSpec, r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; spec.d()];
    drift_into(spec, r, &mut out);
    out
}

/// Solution of the fluid ODE on a uniform grid, with the drift stored at
/// each node for cubic Hermite interpolation.
#[derive(Clone, Debug)]
pub struct FluidPath {
    d: usize,
    step: f64,
    horizon: f64,
    mu: Vec<f64>,
    slope: Vec<f64>,
}

impl FluidPath {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of grid intervals `M`.
    pub fn intervals(&self) -> usize {
        self.mu.len() / self.d - 1
    }

    pub fn node_time(&self, i: usize) -> f64 {
        if i == self.intervals() {
            self.horizon
        } else {
            i as f64 * self.step
        }
    }

    pub fn t_grid(&self) -> Vec<f64> {
        (0..=self.intervals()).map(|i| self.node_time(i)).collect()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.mu[i * self.d..(i + 1) * self.d]
    }

    pub fn node_drift(&self, i: usize) -> &[f64] {
        &self.slope[i * self.d..(i + 1) * self.d]
    }

    pub fn initial(&self) -> &[f64] {
        self.node(0)
    }

    /// `μ(t)` by cubic Hermite interpolation; exact at grid nodes.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= -1e-12 && t <= self.horizon + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        let mut out = vec![0.0; self.d];
        self.eval_into(t.clamp(0.0, self.horizon), &mut out);
        Ok(out)
    }

    /// Unchecked interpolation for `t ∈ [0, T]`.
    #[inline]
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let m = self.intervals();
        let mut i = ((t / self.step).floor() as usize).min(m);
        if t == self.node_time(i) {
            out.copy_from_slice(self.node(i));
            return;
        }
        if i == m {
            i = m - 1;
        }
        let t0 = self.node_time(i);
        let h = self.node_time(i + 1) - t0;
        let s = (t - t0) / h;
        if s >= 1.0 {
            out.copy_from_slice(self.node(i + 1));
            return;
        }
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = (s3 - 2.0 * s2 + s) * h;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = (s3 - s2) * h;
        let d = self.d;
        let (y0, y1) = (&self.mu[i * d..(i + 1) * d], &self.mu[(i + 1) * d..(i + 2) * d]);
        let (m0, m1) = (
            &self.slope[i * d..(i + 1) * d],
            &self.slope[(i + 1) * d..(i + 2) * d],
        );
        for k in 0..d {
            out[k] = h00 * y0[k] + h10 * m0[k] + h01 * y1[k] + h11 * m1[k];
        }
    }

    /// CSV with columns `t, mu_1, …, mu_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for k in 1..=self.d {
            write!(w, ",mu_{k}")?;
        }
        writeln!(w)?;
        for i in 0..=self.intervals() {
            write!(w, "{}", self.node_time(i))?;
            for x in self.node(i) {
                write!(w, ",{x:.17e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn renormalize(r: &mut [f64]) {
    for x in r.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = r.iter().sum();
    r.iter_mut().for_each(|x| *x /= s);
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(d: usize) -> Self {
        Self {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    /// One classical RK4 step of `μ̇ = F(μ)`, then renormalization onto the
    /// simplex. `k1` must already hold `F(r)`.
    fn step(&mut self, spec: &ModelSpec, r: &mut [f64], h: f64) {
        let d = r.len();
        for k in 0..d {
            self.tmp[k] = r[k] + 0.5 * h * self.k1[k];
        }
        drift_into(spec, &self.tmp, &mut self.k2);
        for k in 0..d {
            self.tmp[k] = r[k] + 0.5 * h * self.k2[k];
        }
        drift_into(spec, &self.tmp, &mut self.k3);
        for k in 0..d {
            self.tmp[k] = r[k] + h * self.k3[k];
        }
        drift_into(spec, &self.tmp, &mut self.k4);
        for k in 0..d {
            r[k] += h / 6.0 * (self.k1[k] + 2.0 * self.k2[k] + 2.0 * self.k3[k] + self.k4[k]);
        }
        renormalize(r);
    }
}

/// Classical RK4 on a uniform grid of `round(T/h)` intervals.
pub fn solve_fluid(spec: &ModelSpec, x0: &[f64], horizon: f64, h: f64) -> Result<FluidPath> {
    check_simplex(x0, spec.d())?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon T = {horizon} must be positive")));
    }
    if !(h > 0.0) || h >= horizon {
        return Err(Error::InvalidArgument(format!(
            "step h = {h} must lie in (0, T = {horizon})"
        )));
    }
    let d = spec.d();
    let m = (horizon / h).round().max(1.0) as usize;
    let step = horizon / m as f64;
    let mut mu = Vec::with_capacity((m + 1) * d);
    let mut slope = Vec::with_capacity((m + 1) * d);
    let mut r = x0.to_vec();
    renormalize(&mut r);
    let mut rk = Rk4::new(d);
    for i in 0..=m {
        drift_into(spec, &r, &mut rk.k1);
        mu.extend_from_slice(&r);
        slope.extend_from_slice(&rk.k1);
        if i < m {
            rk.step(spec, &mut r, step);
        }
    }
    Ok(FluidPath {
        d,
        step,
        horizon,
        mu,
        slope,
    })
}

/// Equilibrium of the fluid ODE by pseudo-time RK4 integration from `x0`
/// until `‖F(r)‖_∞ ≤ tol`.
pub fn fixed_point(spec: &ModelSpec, x0: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_simplex(x0, spec.d())?;
    let d = spec.d();
    let mut r = x0.to_vec();
    renormalize(&mut r);
    let mut rk = Rk4::new(d);
    // Step chosen from the total outflow so the explicit scheme stays stable.
    let outflow: f64 = (0..spec.ell())
        .map(|id| spec.base_rate_unchecked(&r, id))
        .sum::<f64>()
        .max(1.0);
    let h = (0.5 / outflow.sqrt()).min(0.05);
    for _ in 0..2_000_000 {
        drift_into(spec, &r, &mut rk.k1);
        let res = rk.k1.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        if res <= tol {
            return Ok(r);
        }
        rk.step(spec, &mut r, h);
    }
    Err(Error::Numerical(format!(
        "fluid fixed-point iteration did not reach tolerance {tol}"
    )))
}
