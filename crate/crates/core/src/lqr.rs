//! Finite-horizon stochastic LQR for the limit diffusion and the
//! box-truncated linear feedback it induces.
//!
//! With running cost `v'Q_c v + u'Ru`, the value is `v'K(t)v + c(t)` where
//! `-K̇ = Q_c + β̃'K + Kβ̃ - K B R⁻¹ B' K`, `K(T) = 0`, and
//! `c(t) = ∫_t^T Tr(σσ'K) ds`. The optimal control is `u = -R⁻¹B'K v`.
//!
//! Fluctuations live in `{x : x·𝟙 = 0}`, so `β̃ = β P` with `P` the orthogonal
//! projector onto that hyperplane. This changes nothing on the hyperplane
//! and makes `K` and the gain blind to the `𝟙` direction.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::coeffs::DiffusionCoeffs;
use crate::control::FeedbackLaw;
use crate::error::{Error, Result};
use crate::model::ControlBox;

/// `‖K‖_max` beyond which the backward integration is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    /// Uniform grid `0 = t_0 < … < t_M = T`.
    pub t_grid: Vec<f64>,
    pub k: Vec<DMatrix<f64>>,
    pub qc: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `G(t) = R⁻¹ B(t)' K(t)`.
    pub gain: Vec<DMatrix<f64>>,
    /// `c(t)`.
    pub value_offset: Vec<f64>,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    pub fn step(&self) -> f64 {
        self.t_grid[1] - self.t_grid[0]
    }

    pub fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn d(&self) -> usize {
        self.qc.nrows()
    }

    /// `-G(t) y`, with `G` linear between grid nodes.
    pub fn raw_feedback_into(&self, t: f64, y: &[f64], out: &mut [f64]) {
        let m = self.t_grid.len() - 1;
        let x = (t / self.step()).clamp(0.0, m as f64);
        let k = (x.floor() as usize).min(m.saturating_sub(1));
        let w = x - k as f64;
        let (g0, g1) = (&self.gain[k], &self.gain[(k + 1).min(m)]);
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &yj) in y.iter().enumerate() {
                acc += ((1.0 - w) * g0[(c, j)] + w * g1[(c, j)]) * yj;
            }
            *o = -acc;
        }
    }

    /// Writes `t, ‖K‖₂, ‖G‖_F, ‖G_c‖ per control row, c(t)` every
    /// `stride`-th node.
    pub fn write_csv<W: Write>(&self, mut w: W, stride: usize) -> Result<()> {
        write!(w, "t,k_spectral_norm,gain_frobenius")?;
        for c in 0..self.control_dim() {
            write!(w, ",gain_row_{}", c + 1)?;
        }
        writeln!(w, ",value_offset")?;
        let last = self.t_grid.len() - 1;
        let mut rows: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
        if rows.last() != Some(&last) {
            rows.push(last);
        }
        for k in rows {
            let spec = SymmetricEigen::new(self.k[k].clone())
                .eigenvalues
                .iter()
                .fold(0.0f64, |a, x| a.max(x.abs()));
            let g = &self.gain[k];
            write!(w, "{},{:e},{:e}", self.t_grid[k], spec, g.norm())?;
            for c in 0..g.nrows() {
                write!(w, ",{:e}", g.row(c).norm())?;
            }
            writeln!(w, ",{:e}", self.value_offset[k])?;
        }
        Ok(())
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidArgument(format!("{name} must be symmetric")));
    }
    Ok(())
}

/// Backward RK4 for the Riccati equation on `[0, T]` with step close to `h`.
pub fn solve_riccati(
    coeffs: &DiffusionCoeffs,
    qc: &DMatrix<f64>,
    r: &DMatrix<f64>,
    horizon: f64,
    h: f64,
) -> Result<RiccatiSolution> {
    let d = coeffs.d();
    let l = coeffs.control_dim();
    if qc.shape() != (d, d) || r.shape() != (l, l) {
        return Err(Error::InvalidArgument(format!(
            "need Qc {d}×{d} and R {l}×{l}, got {:?} and {:?}",
            qc.shape(),
            r.shape()
        )));
    }
    check_symmetric(qc, "Qc")?;
    check_symmetric(r, "R")?;
    let min_q = SymmetricEigen::new(qc.clone()).eigenvalues.min();
    if min_q < -1e-12 * qc.amax().max(1.0) {
        return Err(Error::InvalidArgument(format!("Qc is not PSD (eigenvalue {min_q:e})")));
    }
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("R must be positive definite".into()))?
        .inverse();
    if !(horizon > 0.0) || horizon > coeffs.horizon() + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "T = {horizon} outside the coefficient grid [0, {}]",
            coeffs.horizon()
        )));
    }
    if !(h > 0.0) || h > horizon {
        return Err(Error::InvalidArgument(format!("step {h} must lie in (0, T]")));
    }
    let m = ((horizon / h).round() as usize).max(1);
    let step = horizon / m as f64;

    let proj = DMatrix::identity(d, d) - DMatrix::from_element(d, d, 1.0 / d as f64);
    // (β̃, S = B R⁻¹ B', B, a) at time t.
    let mut beta = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, l);
    let mut a = DMatrix::zeros(d, d);
    let mut at = |t: f64| {
        coeffs.beta.eval_into(t, &mut beta);
        coeffs.b.eval_into(t, &mut b);
        coeffs.a.eval_into(t, &mut a);
        let bt = &beta * &proj;
        let s = &b * &r_inv * b.transpose();
        (bt, s, b.clone(), a.clone())
    };
    let field = |k: &DMatrix<f64>, bt: &DMatrix<f64>, s: &DMatrix<f64>| {
        let kb = k * bt;
        qc + kb.transpose() + kb - k * s * k
    };

    let mut ks = vec![DMatrix::zeros(d, d); m + 1];
    let mut gains = vec![DMatrix::zeros(l, d); m + 1];
    let mut traces = vec![0.0; m + 1];
    let mut k = DMatrix::zeros(d, d);
    let (mut bt_hi, mut s_hi, b_hi, _) = at(horizon);
    gains[m] = &r_inv * b_hi.transpose() * &k;
    for i in (0..m).rev() {
        let t_lo = i as f64 * step;
        let t_mid = t_lo + 0.5 * step;
        let (bt_mid, s_mid, _, _) = at(t_mid);
        let (bt_lo, s_lo, b_lo, a_lo) = at(t_lo);
        let k1 = field(&k, &bt_hi, &s_hi);
        let k2 = field(&(&k + 0.5 * step * &k1), &bt_mid, &s_mid);
        let k3 = field(&(&k + 0.5 * step * &k2), &bt_mid, &s_mid);
        let k4 = field(&(&k + step * &k3), &bt_lo, &s_lo);
        k += (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        k = 0.5 * (&k + k.transpose());
        let norm = k.amax();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::Numerical(format!(
                "Riccati solution diverged (‖K‖_max = {norm:e}) at t = {t_lo}"
            )));
        }
        gains[i] = &r_inv * b_lo.transpose() * &k;
        // Tr(σσ'K) with σσ' = a.
        traces[i] = a_lo.component_mul(&k).sum();
        ks[i] = k.clone();
        bt_hi = bt_lo;
        s_hi = s_lo;
    }
    let mut offset = vec![0.0; m + 1];
    for i in (0..m).rev() {
        offset[i] = offset[i + 1] + 0.5 * step * (traces[i] + traces[i + 1]);
    }
    Ok(RiccatiSolution {
        t_grid: (0..=m).map(|i| i as f64 * step).collect(),
        k: ks,
        qc: qc.clone(),
        r: r.clone(),
        gain: gains,
        value_offset: offset,
    })
}

/// `v0' K(0) v0 + c(0)`: the LQR value ignoring the control box.
pub fn lqr_value(sol: &RiccatiSolution, v0: &[f64]) -> f64 {
    let k = &sol.k[0];
    let mut quad = 0.0;
    for i in 0..v0.len() {
        for j in 0..v0.len() {
            quad += v0[i] * k[(i, j)] * v0[j];
        }
    }
    quad + sol.value_offset[0]
}

/// `g(t, y) = clamp(-s·G(t) y)` with gain scale `s`.
#[derive(Clone, Debug)]
pub struct LqrFeedback {
    pub solution: Arc<RiccatiSolution>,
    /// `None` leaves the feedback untruncated.
    pub bounds: Option<ControlBox>,
    pub scale: f64,
}

impl LqrFeedback {
    pub fn new(solution: Arc<RiccatiSolution>, bounds: Option<ControlBox>) -> Self {
        Self {
            solution,
            bounds,
            scale: 1.0,
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            scale,
            ..self.clone()
        }
    }
}

impl FeedbackLaw for LqrFeedback {
    fn control_dim(&self) -> usize {
        self.solution.control_dim()
    }

    fn eval(&self, t: f64, y: &[f64], out: &mut [f64]) -> bool {
        self.solution.raw_feedback_into(t, y, out);
        if self.scale != 1.0 {
            out.iter_mut().for_each(|x| *x *= self.scale);
        }
        self.bounds.as_ref().is_some_and(|b| b.clamp(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{assemble_coeffs, solve_moments};
    use crate::fluid::solve_fluid;
    use crate::interp::MatrixSeries;
    use crate::lossnet::{LossNetParams, LossNetwork};
    use crate::two_state::{two_state_model, TwoStateParams};
    use nalgebra::DVector;

    fn two_state_coeffs(t: f64) -> DiffusionCoeffs {
        let m = two_state_model(&TwoStateParams::default()).unwrap();
        let fluid = solve_fluid(&m, &[0.5, 0.5], t, 1e-3).unwrap();
        assemble_coeffs(&m, &fluid, &fluid.t_grid()).unwrap()
    }

    /// Closed-form solution of `dk/dτ = 1 - 4k - c k²`, `k(0) = 0`, with
    /// `τ = T - t` and `c = b̂²/r`.
    fn scalar_k(c: f64, tau: f64) -> f64 {
        let omega = (16.0 + 4.0 * c).sqrt();
        let kp = (-4.0 + omega) / (2.0 * c);
        let km = (-4.0 - omega) / (2.0 * c);
        let e = (-omega * tau).exp();
        kp * km * (1.0 - e) / (km - kp * e)
    }

    #[test]
    fn scalar_oracle_is_consistent() {
        let c = 50.0;
        let h = 1e-6;
        for tau in [0.0, 0.1, 1.0] {
            let dk = (scalar_k(c, tau + h) - scalar_k(c, (tau - h).max(0.0))) / (if tau == 0.0 { h } else { 2.0 * h });
            let k = scalar_k(c, tau);
            assert!((dk - (1.0 - 4.0 * k - c * k * k)).abs() < 1e-4);
        }
    }

    #[test]
    fn two_state_matches_scalar_riccati() {
        let coeffs = two_state_coeffs(2.0);
        let q1 = coeffs.q.column(0).into_owned();
        for alpha in [1.0, 0.1, 0.01] {
            let r = DMatrix::from_element(1, 1, alpha);
            let sol = solve_riccati(&coeffs, &DMatrix::identity(2, 2), &r, 2.0, 1e-3).unwrap();
            let c = 0.5 / alpha;
            let mut worst: f64 = 0.0;
            for (t, k) in sol.t_grid.iter().zip(&sol.k) {
                let num = (q1.transpose() * k * &q1)[(0, 0)];
                worst = worst.max((num - scalar_k(c, 2.0 - t)).abs());
            }
            assert!(worst < 1e-6, "alpha {alpha}: {worst:e}");
            // Gain on q1: r⁻¹ b̂ k(0) with b̂ = q1'B.
            let bhat = (q1.transpose() * coeffs.b.node(0))[(0, 0)];
            let ghat = (&sol.gain[0] * &q1)[0];
            assert!((ghat - bhat * scalar_k(c, 2.0) / alpha).abs() < 1e-6);
            // Value at v0 = 0: ∫ 2 k ds by Simpson on the closed form.
            let n = 20_000;
            let hs = 2.0 / n as f64;
            let simpson: f64 = (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * 2.0 * scalar_k(c, i as f64 * hs)
                })
                .sum::<f64>()
                * hs
                / 3.0;
            assert!((lqr_value(&sol, &[0.0, 0.0]) - simpson).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_state_cost_gives_zero_solution() {
        let coeffs = two_state_coeffs(1.0);
        let sol = solve_riccati(&coeffs, &DMatrix::zeros(2, 2), &DMatrix::identity(1, 1), 1.0, 1e-2).unwrap();
        assert!(sol.k.iter().all(|k| k.amax() == 0.0));
        assert!(sol.gain.iter().all(|g| g.amax() == 0.0));
        assert_eq!(lqr_value(&sol, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let coeffs = two_state_coeffs(1.0);
        let q = DMatrix::identity(2, 2);
        assert!(solve_riccati(&coeffs, &q, &DMatrix::zeros(1, 1), 1.0, 1e-2).is_err());
        assert!(solve_riccati(&coeffs, &(-1.0 * &q), &DMatrix::identity(1, 1), 1.0, 1e-2).is_err());
        assert!(solve_riccati(&coeffs, &q, &DMatrix::identity(1, 1), 5.0, 1e-2).is_err());
    }

    #[test]
    fn without_control_matches_linear_backward_ode() {
        // B = 0: -K̇ = I + β̃'K + Kβ̃ is linear.
        let mut coeffs = two_state_coeffs(1.0);
        let g = coeffs.t_grid.clone();
        coeffs.b = MatrixSeries::new(g.clone(), g.iter().map(|_| DMatrix::zeros(2, 1)).collect()).unwrap();
        let sol = solve_riccati(&coeffs, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1), 1.0, 1e-3).unwrap();
        // Constant β̃ = βP here, so K(t) = ∫_0^{T-t} e^{β̃'s} e^{β̃s} ds. On q1
        // this is (1 - e^{-4τ})/4; on 𝟙/√2 it is τ.
        let q1 = coeffs.q.column(0).into_owned();
        let q2 = coeffs.q.column(1).into_owned();
        for (t, k) in sol.t_grid.iter().zip(&sol.k) {
            let tau = 1.0 - t;
            assert!(((q1.transpose() * k * &q1)[(0, 0)] - (1.0 - (-4.0 * tau).exp()) / 4.0).abs() < 1e-8);
            assert!(((q2.transpose() * k * &q2)[(0, 0)] - tau).abs() < 1e-8);
        }
        // With constant coefficients the reduced variance at T is σ̂² k(0).
        let m = solve_moments(&coeffs, &[0.0, 0.0], 1.0).unwrap();
        let var = (q1.transpose() * m.final_cov() * &q1)[(0, 0)];
        assert!((var - 2.0 * (q1.transpose() * &sol.k[0] * &q1)[(0, 0)]).abs() < 1e-8);
    }

    #[test]
    fn lossnet_gain_ignores_ones_and_value_grows_with_alpha() {
        let net = LossNetwork::new(&LossNetParams::default()).unwrap();
        let spec = net.spec();
        let x0 = vec![1.0 / 28.0; 28];
        let fluid = solve_fluid(spec, &x0, 1.0, 1e-2).unwrap();
        let coeffs = assemble_coeffs(spec, &fluid, &fluid.t_grid()).unwrap();
        let ones = DVector::from_element(28, 1.0);
        let mut last = 0.0;
        for alpha in [1e-3, 1e-2, 1e-1] {
            let r = DMatrix::from_diagonal_element(2, 2, 21.0 * alpha);
            let sol = solve_riccati(&coeffs, &DMatrix::identity(28, 28), &r, 1.0, 1e-2).unwrap();
            for g in &sol.gain {
                assert!((g * &ones).amax() < 1e-8);
            }
            for k in &sol.k {
                assert!((k - k.transpose()).amax() < 1e-10);
                assert!(SymmetricEigen::new(k.clone()).eigenvalues.min() > -1e-9);
            }
            assert_eq!(sol.k.last().unwrap().amax(), 0.0);
            let v = lqr_value(&sol, &vec![0.0; 28]);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn feedback_saturates_and_vanishes_at_origin() {
        let coeffs = two_state_coeffs(1.0);
        let sol = Arc::new(
            solve_riccati(&coeffs, &DMatrix::identity(2, 2), &DMatrix::from_element(1, 1, 0.01), 1.0, 1e-3).unwrap(),
        );
        let g = LqrFeedback::new(sol, Some(ControlBox::symmetric(1, 5.0)));
        let mut u = [1.0];
        assert!(!g.eval(0.3, &[0.0, 0.0], &mut u));
        assert_eq!(u[0], 0.0);
        assert!(g.eval(0.3, &[1e3, -1e3], &mut u));
        assert_eq!(u[0].abs(), 5.0);
        let mut v = [0.0];
        g.scaled(0.5).eval(0.3, &[0.01, -0.01], &mut v);
        g.eval(0.3, &[0.01, -0.01], &mut u);
        assert!((v[0] - 0.5 * u[0]).abs() < 1e-15);
    }
}
