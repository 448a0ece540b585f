//! Coefficients of the limit diffusion `dV = B u dt + β V dt + σ dW` along a
//! fluid path, and the moment equations of its uncontrolled version.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fluid::FluidPath;
use crate::interp::MatrixSeries;
use crate::model::ModelSpec;

/// Tolerance on the `𝟙`-row and column of `Q' a Q` before assembly fails.
pub const ZERO_BLOCK_TOL: f64 = 1e-8;

/// Orthogonal `Q` whose last column is `𝟙/√d`: the Householder reflection
/// exchanging `e_d` and `𝟙/√d`.
pub fn build_q(d: usize) -> Result<DMatrix<f64>> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("Q needs d ≥ 2, got {d}")));
    }
    let inv = 1.0 / (d as f64).sqrt();
    let mut w = DVector::from_element(d, -inv);
    w[d - 1] += 1.0;
    let scale = 2.0 / w.norm_squared();
    let mut q = DMatrix::identity(d, d);
    q.ger(-scale, &w, &w, 1.0);
    // Pin the last column to its exact value.
    q.column_mut(d - 1).fill(inv);
    Ok(q)
}

/// `(B, β, a)` at a single point `r` of the simplex.
pub fn coefficients_at(spec: &ModelSpec, r: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = spec.d();
    let mut b = DMatrix::zeros(d, spec.control_dim());
    let mut beta = DMatrix::zeros(d, d);
    let mut a = DMatrix::zeros(d, d);
    let mut g = vec![0.0; d];
    for (id, tr) in spec.transitions().iter().enumerate() {
        let rate = spec.base_rate_unchecked(r, id);
        if rate != 0.0 {
            for &(m, sm) in &tr.sparse {
                for &(k, sk) in &tr.sparse {
                    a[(m, k)] += rate * (sm * sk) as f64;
                }
            }
        }
        if let Some(c) = spec.control_coord(id) {
            let h1 = spec.h1(r, id);
            if h1 != 0.0 {
                for &(m, sm) in &tr.sparse {
                    b[(m, c)] += h1 * sm as f64;
                }
            }
        }
        g.iter_mut().for_each(|x| *x = 0.0);
        spec.h2(r, id, &mut g);
        for &(m, sm) in &tr.sparse {
            let sm = sm as f64;
            for (k, &gk) in g.iter().enumerate() {
                if gk != 0.0 {
                    beta[(m, k)] += sm * gk;
                }
            }
        }
    }
    (b, beta, a)
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
/// Also returns the smallest eigenvalue before clamping.
pub fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let roots = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&roots) * v.transpose();
    (0.5 * (&root + root.transpose()), min)
}

/// Diffusion coefficients on a time grid, Hermite-interpolated in between.
#[derive(Clone, Debug)]
pub struct DiffusionCoeffs {
    pub t_grid: Vec<f64>,
    pub q: DMatrix<f64>,
    /// `d × ℓ_eff`: `η(t, u) = B(t) u` in reduced control coordinates.
    pub b: MatrixSeries,
    pub beta: MatrixSeries,
    pub a: MatrixSeries,
    /// `(d-1) × (d-1)` nondegenerate block of `Q' a Q`.
    pub alpha: MatrixSeries,
    pub alpha_sqrt: MatrixSeries,
    pub sigma: MatrixSeries,
    /// Smallest eigenvalue of `α` over the grid.
    pub min_alpha_eig: f64,
    /// Largest `|entry|` in the last row and column of `Q' a Q`.
    pub zero_block_residual: f64,
}

/// Worst-case residuals of the structural identities over the grid.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct CoeffIdentities {
    /// `‖Q'Q - I‖_max`.
    pub orthogonality: f64,
    /// `‖σσ' - a‖_max`.
    pub sigma_square: f64,
    /// `‖(α^{1/2})² - α‖_max`.
    pub alpha_sqrt_square: f64,
    pub zero_block: f64,
    /// `‖a 𝟙‖_max`.
    pub a_ones: f64,
    pub min_alpha_eig: f64,
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

impl DiffusionCoeffs {
    pub fn d(&self) -> usize {
        self.q.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.shape().1
    }

    pub fn horizon(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    pub fn identities(&self) -> CoeffIdentities {
        let d = self.d();
        let mut out = CoeffIdentities {
            orthogonality: max_abs(&(self.q.transpose() * &self.q - DMatrix::identity(d, d))),
            zero_block: self.zero_block_residual,
            min_alpha_eig: self.min_alpha_eig,
            ..Default::default()
        };
        let ones = DVector::from_element(d, 1.0);
        for k in 0..self.t_grid.len() {
            let a = self.a.node(k);
            let s = self.sigma.node(k);
            out.sigma_square = out.sigma_square.max(max_abs(&(s * s.transpose() - a)));
            let r = self.alpha_sqrt.node(k);
            out.alpha_sqrt_square = out.alpha_sqrt_square.max(max_abs(&(r * r - self.alpha.node(k))));
            out.a_ones = out.a_ones.max((a * &ones).amax());
        }
        out
    }

    /// Writes `a`, `alpha`, `sigma`, `beta` and `B` as CSV files (one row per
    /// exported node: `t` then the entries in row-major order). Every
    /// `stride`-th node is exported, plus the last.
    pub fn write_csv(&self, dir: &Path, stride: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        let stride = stride.max(1);
        let mut rows: Vec<usize> = (0..self.t_grid.len()).step_by(stride).collect();
        if rows.last() != Some(&(self.t_grid.len() - 1)) {
            rows.push(self.t_grid.len() - 1);
        }
        let series = [
            ("a", &self.a),
            ("alpha", &self.alpha),
            ("sigma", &self.sigma),
            ("beta", &self.beta),
            ("B", &self.b),
        ];
        for (name, s) in series {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.csv")))?);
            let (nr, nc) = s.shape();
            write!(w, "t")?;
            for i in 0..nr {
                for j in 0..nc {
                    write!(w, ",{name}_{}_{}", i + 1, j + 1)?;
                }
            }
            writeln!(w)?;
            for &k in &rows {
                let m = s.node(k);
                write!(w, "{}", self.t_grid[k])?;
                for i in 0..nr {
                    for j in 0..nc {
                        write!(w, ",{:e}", m[(i, j)])?;
                    }
                }
                writeln!(w)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Evaluates all coefficients at the fluid path on `t_grid`.
pub fn assemble_coeffs(spec: &ModelSpec, fluid: &FluidPath, t_grid: &[f64]) -> Result<DiffusionCoeffs> {
    let d = spec.d();
    if fluid.d() != d {
        return Err(Error::InvalidArgument(format!(
            "fluid path has d = {}, model has d = {d}",
            fluid.d()
        )));
    }
    if t_grid.is_empty()
        || t_grid[0] < -1e-12
        || *t_grid.last().unwrap() > fluid.horizon() + 1e-12
    {
        return Err(Error::InvalidArgument(format!(
            "time grid not covered by the fluid path on [0, {}]",
            fluid.horizon()
        )));
    }
    let q = build_q(d)?;
    let qt = q.transpose();
    let n = t_grid.len();
    let mut bs = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    let mut as_ = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let mut roots = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut min_eig = f64::INFINITY;
    let mut zero_block: f64 = 0.0;
    let mut r = vec![0.0; d];
    let mut embed = DMatrix::zeros(d, d);
    for &t in t_grid {
        fluid.eval_into(t, &mut r);
        let (b, beta, a) = coefficients_at(spec, &r);
        let rot = &qt * &a * &q;
        let resid = (0..d)
            .map(|k| rot[(d - 1, k)].abs().max(rot[(k, d - 1)].abs()))
            .fold(0.0, f64::max);
        if resid > ZERO_BLOCK_TOL {
            return Err(Error::Consistency(format!(
                "Q'aQ has {resid:e} outside its nondegenerate block at t = {t}; \
                 some jump vector does not sum to zero"
            )));
        }
        zero_block = zero_block.max(resid);
        let alpha = rot.view((0, 0), (d - 1, d - 1)).into_owned();
        let alpha = 0.5 * (&alpha + alpha.transpose());
        let (root, min) = psd_sqrt(&alpha);
        min_eig = min_eig.min(min);
        embed.fill(0.0);
        embed.view_mut((0, 0), (d - 1, d - 1)).copy_from(&root);
        sigmas.push(&q * &embed * &qt);
        bs.push(b);
        betas.push(beta);
        as_.push(a);
        alphas.push(alpha);
        roots.push(root);
    }
    let g = t_grid.to_vec();
    Ok(DiffusionCoeffs {
        t_grid: g.clone(),
        q,
        b: MatrixSeries::new(g.clone(), bs)?,
        beta: MatrixSeries::new(g.clone(), betas)?,
        a: MatrixSeries::new(g.clone(), as_)?,
        alpha: MatrixSeries::new(g.clone(), alphas)?,
        alpha_sqrt: MatrixSeries::new(g.clone(), roots)?,
        sigma: MatrixSeries::new(g, sigmas)?,
        min_alpha_eig: min_eig,
        zero_block_residual: zero_block,
    })
}

/// Mean and covariance of the uncontrolled limit diffusion.
#[derive(Clone, Debug)]
pub struct GaussMarkovMoments {
    pub t_grid: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl GaussMarkovMoments {
    pub fn final_mean(&self) -> &DVector<f64> {
        self.mean.last().unwrap()
    }

    pub fn final_cov(&self) -> &DMatrix<f64> {
        self.cov.last().unwrap()
    }
}

/// RK4 for `ṁ = β m`, `Σ̇ = βΣ + Σβ' + a` from `m(0) = v0`, `Σ(0) = 0`,
/// stepping along the coefficient grid up to `T`.
pub fn solve_moments(coeffs: &DiffusionCoeffs, v0: &[f64], horizon: f64) -> Result<GaussMarkovMoments> {
    let d = coeffs.d();
    if v0.len() != d {
        return Err(Error::InvalidArgument(format!("v0 has {} entries, d = {d}", v0.len())));
    }
    if v0.iter().sum::<f64>().abs() > 1e-9 {
        return Err(Error::InvalidArgument("v0 must sum to zero".into()));
    }
    if !(horizon >= 0.0) || horizon > coeffs.horizon() + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "T = {horizon} outside the coefficient grid [0, {}]",
            coeffs.horizon()
        )));
    }
    let mut times: Vec<f64> = coeffs.t_grid.iter().copied().take_while(|&t| t < horizon - 1e-12).collect();
    times.push(horizon);

    let mut beta = DMatrix::zeros(d, d);
    let mut a = DMatrix::zeros(d, d);
    let mut field = |t: f64, m: &DVector<f64>, s: &DMatrix<f64>| {
        coeffs.beta.eval_into(t, &mut beta);
        coeffs.a.eval_into(t, &mut a);
        let bs = &beta * s;
        (&beta * m, &bs + bs.transpose() + &a)
    };

    let mut m = DVector::from_column_slice(v0);
    let mut s = DMatrix::zeros(d, d);
    let mut out = GaussMarkovMoments {
        t_grid: vec![times[0]],
        mean: vec![m.clone()],
        cov: vec![s.clone()],
    };
    for w in times.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let (m1, s1) = field(t, &m, &s);
        let (m2, s2) = field(t + 0.5 * h, &(&m + 0.5 * h * &m1), &(&s + 0.5 * h * &s1));
        let (m3, s3) = field(t + 0.5 * h, &(&m + 0.5 * h * &m2), &(&s + 0.5 * h * &s2));
        let (m4, s4) = field(t + h, &(&m + h * &m3), &(&s + h * &s3));
        m += (h / 6.0) * (m1 + 2.0 * m2 + 2.0 * m3 + m4);
        s += (h / 6.0) * (s1 + 2.0 * s2 + 2.0 * s3 + s4);
        s = 0.5 * (&s + s.transpose());
        out.t_grid.push(w[1]);
        out.mean.push(m.clone());
        out.cov.push(s.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::solve_fluid;
    use crate::lossnet::{LossNetParams, LossNetwork};
    use crate::two_state::{two_state_model, TwoStateParams};
    use approx::assert_abs_diff_eq;

    fn two_state_coeffs(t: f64) -> DiffusionCoeffs {
        let m = two_state_model(&TwoStateParams::default()).unwrap();
        let fluid = solve_fluid(&m, &[0.5, 0.5], t, 1e-3).unwrap();
        assemble_coeffs(&m, &fluid, &fluid.t_grid()).unwrap()
    }

    #[test]
    fn q_is_orthogonal_with_ones_column() {
        assert!(build_q(1).is_err());
        for d in [2, 3, 28] {
            let q = build_q(d).unwrap();
            let e = q.transpose() * &q - DMatrix::identity(d, d);
            assert!(max_abs(&e) <= 1e-12);
            let ones = DVector::from_element(d, 1.0);
            let p = q.transpose() * ones;
            for k in 0..d - 1 {
                assert!(p[k].abs() < 1e-12);
            }
            assert!((p[d - 1] - (d as f64).sqrt()).abs() < 1e-12);
        }
        let q = build_q(2).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(q[(0, 0)].abs(), s, epsilon = 1e-15);
        assert_abs_diff_eq!(q[(0, 0)], -q[(1, 0)], epsilon = 1e-15);
    }

    #[test]
    fn two_state_hand_values() {
        let c = two_state_coeffs(1.0);
        let q1 = c.q.column(0).into_owned();
        for t in [0.0, 0.37, 1.0] {
            let a = c.a.eval(t);
            assert_abs_diff_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]), epsilon = 1e-12);
            assert_abs_diff_eq!(c.alpha.eval(t)[(0, 0)], 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.alpha_sqrt.eval(t)[(0, 0)], 2f64.sqrt(), epsilon = 1e-12);
            let s = c.sigma.eval(t);
            let h = std::f64::consts::FRAC_1_SQRT_2;
            assert_abs_diff_eq!(s, DMatrix::from_row_slice(2, 2, &[h, -h, -h, h]), epsilon = 1e-12);
            let beta = c.beta.eval(t);
            assert_abs_diff_eq!(beta, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]), epsilon = 1e-12);
            assert_abs_diff_eq!((q1.transpose() * &beta * &q1)[(0, 0)], -2.0, epsilon = 1e-12);
            let b = c.b.eval(t);
            assert_abs_diff_eq!(b[(0, 0)], -0.5, epsilon = 1e-12);
            assert_abs_diff_eq!((q1.transpose() * &b)[(0, 0)].abs(), h, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_state_variance_oracle() {
        let c = two_state_coeffs(1.0);
        let m = solve_moments(&c, &[0.0, 0.0], 1.0).unwrap();
        let q1 = c.q.column(0).into_owned();
        let var = (q1.transpose() * m.final_cov() * &q1)[(0, 0)];
        let oracle = 0.5 * (1.0 - (-4.0f64).exp());
        assert!((var - oracle).abs() < 1e-10, "{var} vs {oracle}");
        assert!((m.final_cov()[(0, 0)] - 0.25 * (1.0 - (-4.0f64).exp())).abs() < 1e-10);
        let ones = DVector::from_element(2, 1.0);
        assert!((m.final_cov() * ones).amax() < 1e-12);
    }

    #[test]
    fn moments_without_drift_integrate_a() {
        let mut c = two_state_coeffs(2.0);
        // Replace β by zero and a by a time-varying PSD matrix.
        let g = c.t_grid.clone();
        let zeros = g.iter().map(|_| DMatrix::zeros(2, 2)).collect();
        c.beta = MatrixSeries::new(g.clone(), zeros).unwrap();
        let av = |t: f64| (1.0 + t * t) * DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        c.a = MatrixSeries::new(g.clone(), g.iter().map(|&t| av(t)).collect()).unwrap();
        let m = solve_moments(&c, &[0.2, -0.2], 2.0).unwrap();
        // Trapezoid on the same nodes.
        let mut trap = 0.0;
        for w in g.windows(2) {
            trap += 0.5 * (w[1] - w[0]) * (2.0 + w[0] * w[0] + w[1] * w[1]);
        }
        assert!((m.final_cov()[(0, 0)] - trap).abs() < 1e-6);
        assert!((m.final_cov()[(0, 0)] - (2.0 + 8.0 / 3.0)).abs() < 1e-8);
        assert_eq!(m.final_mean().as_slice(), &[0.2, -0.2]);
    }

    #[test]
    fn no_noise_means_no_covariance() {
        let mut c = two_state_coeffs(1.0);
        let g = c.t_grid.clone();
        c.a = MatrixSeries::new(g.clone(), g.iter().map(|_| DMatrix::zeros(2, 2)).collect()).unwrap();
        let m = solve_moments(&c, &[0.0, 0.0], 1.0).unwrap();
        assert!(m.cov.iter().all(|s| max_abs(s) == 0.0));
    }

    #[test]
    fn lossnet_identities_hold() {
        let net = LossNetwork::new(&LossNetParams::default()).unwrap();
        let spec = net.spec();
        let x0 = vec![1.0 / 28.0; 28];
        let fluid = solve_fluid(spec, &x0, 0.5, 1e-2).unwrap();
        let c = assemble_coeffs(spec, &fluid, &fluid.t_grid()).unwrap();
        let id = c.identities();
        assert!(id.orthogonality <= 1e-12);
        assert!(id.sigma_square <= 1e-8, "{id:?}");
        assert!(id.zero_block <= 1e-10);
        assert!(id.alpha_sqrt_square <= 1e-9);
        assert!(id.a_ones <= 1e-12);
        assert!(id.min_alpha_eig > 0.0);
        // Two reduced control columns; the first collects the class-1 entries.
        let b = c.b.node(0);
        assert_eq!(b.ncols(), 2);
        let l = net.layout();
        let mut col = vec![0.0; 28];
        for s in 0..28 {
            if let Some(&t) = l.up[0].get(s).filter(|&&t| t != usize::MAX) {
                col[s] -= x0[s];
                col[t] += x0[s];
            }
        }
        for k in 0..28 {
            assert!((b[(k, 0)] - col[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_block_is_tracked() {
        let c = two_state_coeffs(0.1);
        assert!(c.zero_block_residual <= 1e-15);
    }
}
