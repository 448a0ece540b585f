//! Cost comparison reports and Gaussian-fit diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::coeffs::{build_q, GaussMarkovMoments};
use crate::control::Policy;
use crate::ctmc::RunSummary;
use crate::error::{Error, Result};
use crate::stats::Stat;

/// Row labels of the comparison table.
pub const ROW_LABELS: [&str; 3] = ["Deviation Cost", "Control Cost", "Total Cost"];

/// One simulated arm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmReport {
    pub label: String,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub summary: RunSummary,
    /// `∫‖g‖²_M dt` with `R = α M`, i.e. the control cost divided by `α`.
    pub control_energy: Stat,
    /// Riccati value `J(v0)` of the limit problem, for controlled arms.
    pub lqr_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub reference: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reduction {
    pub alpha: f64,
    /// `100 (1 − controlled total / uncontrolled total)`.
    pub total_pct: f64,
    pub deviation_pct: f64,
    pub reference_total_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub version: String,
    pub config_hash: String,
    pub model: String,
    pub n: usize,
    pub horizon: f64,
    pub n_trials: usize,
    pub x0: Vec<f64>,
    pub arms: Vec<ArmReport>,
    pub reductions: Vec<Reduction>,
    /// Deviation, control energy and total per arm, in arm order.
    pub table: Vec<TableRow>,
    pub gaussian: Option<GaussianDiagnostics>,
}

/// `100 (1 − controlled / uncontrolled)`.
pub fn reduction_pct(uncontrolled: f64, controlled: f64) -> f64 {
    100.0 * (1.0 - controlled / uncontrolled)
}

impl ComparisonReport {
    /// Builds the table and reductions from the arms; the first arm must be
    /// the uncontrolled one. `reference` holds published
    /// `(deviation, energy, total)` triples in the same arm order.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config_hash: String,
        model: String,
        n: usize,
        horizon: f64,
        n_trials: usize,
        x0: Vec<f64>,
        arms: Vec<ArmReport>,
        reference: Option<Vec<(f64, f64, f64)>>,
        gaussian: Option<GaussianDiagnostics>,
    ) -> Self {
        let col = |f: &dyn Fn(&ArmReport) -> Stat| -> (Vec<f64>, Vec<f64>) {
            arms.iter().map(|a| (f(a).mean, f(a).stderr)).unzip()
        };
        let refcol = |k: usize| {
            reference.as_ref().map(|r| {
                r.iter()
                    .map(|t| [t.0, t.1, t.2][k])
                    .collect::<Vec<f64>>()
            })
        };
        let stats: [&dyn Fn(&ArmReport) -> Stat; 3] = [
            &|a| a.summary.dev_cost,
            &|a| a.control_energy,
            &|a| a.summary.total_cost,
        ];
        let table = ROW_LABELS
            .iter()
            .zip(stats)
            .enumerate()
            .map(|(k, (label, f))| {
                let (values, stderr) = col(f);
                TableRow {
                    label: label.to_string(),
                    values,
                    stderr,
                    reference: refcol(k),
                }
            })
            .collect();
        let base = &arms[0];
        let reductions = arms
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, a)| Reduction {
                alpha: a.alpha.unwrap_or(f64::NAN),
                total_pct: reduction_pct(base.summary.total_cost.mean, a.summary.total_cost.mean),
                deviation_pct: reduction_pct(base.summary.dev_cost.mean, a.summary.dev_cost.mean),
                reference_total_pct: reference
                    .as_ref()
                    .and_then(|r| Some(reduction_pct(r.first()?.2, r.get(i)?.2))),
            })
            .collect();
        Self {
            version: crate::VERSION.to_string(),
            config_hash,
            model,
            n,
            horizon,
            n_trials,
            x0,
            arms,
            reductions,
            table,
            gaussian,
        }
    }

    /// Plain-text table, one row per cost with `ours (reference)` cells.
    pub fn render_table(&self) -> String {
        let mut s = format!("{:<16}", "");
        for a in &self.arms {
            s += &format!("{:>26}", a.label);
        }
        s.push('\n');
        for row in &self.table {
            s += &format!("{:<16}", row.label);
            for (k, v) in row.values.iter().enumerate() {
                let cell = match &row.reference {
                    Some(r) => format!("{v:.4} ({:.4})", r[k]),
                    None => format!("{v:.4} ± {:.4}", row.stderr[k]),
                };
                s += &format!("{cell:>26}");
            }
            s.push('\n');
        }
        for r in &self.reductions {
            s += &format!("reduction at alpha = {}: {:.2}%", r.alpha, r.total_pct);
            if let Some(p) = r.reference_total_pct {
                s += &format!(" (reference table: {p:.2}%)");
            }
            s.push('\n');
        }
        s
    }
}

/// Fit of terminal fluctuations to the Gauss–Markov limit law, in the
/// `(d−1)` reduced coordinates `Q' v`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianDiagnostics {
    pub n_samples: usize,
    pub dim: usize,
    /// `(mean_i − m_i) / √(Σ_ii / n)` per reduced coordinate.
    pub standardized_mean_error: Vec<f64>,
    pub max_abs_standardized_mean_error: f64,
    /// `‖S − Σ‖_F / ‖Σ‖_F`.
    pub cov_rel_frobenius_error: f64,
    /// Sample and model variances of the first reduced coordinate.
    pub first_coord_variance: f64,
    pub first_coord_model_variance: f64,
    /// Mardia's multivariate skewness `b_{1,p}` and `n b / 6`, which is
    /// asymptotically χ² with `p(p+1)(p+2)/6` degrees of freedom.
    pub mardia_skewness: Option<f64>,
    pub mardia_skewness_stat: Option<f64>,
    pub mardia_skewness_df: f64,
    /// Mardia's kurtosis `b_{2,p}` and its standardized value.
    pub mardia_kurtosis: Option<f64>,
    pub mardia_kurtosis_z: Option<f64>,
    pub note: Option<String>,
}

/// Compares samples of `V_N(T)` with the final moments of the limit.
/// Only meaningful for the uncontrolled system.
pub fn gaussian_diagnostics(
    samples: &[Vec<f64>],
    moments: &GaussMarkovMoments,
    policy: &Policy,
) -> Result<GaussianDiagnostics> {
    if policy.is_controlled() {
        return Err(Error::InvalidArgument(
            "Gaussian diagnostics need the uncontrolled arm; the limit moments do not describe a controlled system".into(),
        ));
    }
    let n = samples.len();
    if n < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 samples, got {n}")));
    }
    let d = moments.final_mean().len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::InvalidArgument(format!("samples must have length d = {d}")));
    }
    let p = d - 1;
    let q = build_q(d)?;
    let qr = q.columns(0, p).into_owned();
    let qt = qr.transpose();
    let m = &qt * moments.final_mean();
    let sigma = &qt * moments.final_cov() * &qr;

    let z: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| &qt * DVector::from_column_slice(s))
        .collect();
    let nf = n as f64;
    let mean = z.iter().fold(DVector::zeros(p), |acc, x| acc + x) / nf;
    let mut s = DMatrix::zeros(p, p);
    for x in &z {
        let c = x - &mean;
        s += &c * c.transpose();
    }
    s /= nf - 1.0;

    let standardized_mean_error: Vec<f64> = (0..p)
        .map(|i| (mean[i] - m[i]) / (sigma[(i, i)] / nf).sqrt())
        .collect();
    let max_abs = standardized_mean_error.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let cov_err = (&s - &sigma).norm() / sigma.norm();

    let pf = p as f64;
    let mut out = GaussianDiagnostics {
        n_samples: n,
        dim: p,
        standardized_mean_error,
        max_abs_standardized_mean_error: max_abs,
        cov_rel_frobenius_error: cov_err,
        first_coord_variance: s[(0, 0)],
        first_coord_model_variance: sigma[(0, 0)],
        mardia_skewness: None,
        mardia_skewness_stat: None,
        mardia_skewness_df: pf * (pf + 1.0) * (pf + 2.0) / 6.0,
        mardia_kurtosis: None,
        mardia_kurtosis_z: None,
        note: None,
    };

    // Mardia statistics use the biased sample covariance.
    let s_biased = &s * ((nf - 1.0) / nf);
    match s_biased.clone().cholesky() {
        None => out.note = Some("sample covariance of the reduced coordinates is singular".into()),
        Some(ch) => {
            let w: Vec<DVector<f64>> = z.iter().map(|x| ch.l().solve_lower_triangular(&(x - &mean)).unwrap()).collect();
            let mut b1 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    b1 += w[i].dot(&w[j]).powi(3);
                }
            }
            b1 /= nf * nf;
            let b2 = w.iter().map(|x| x.norm_squared().powi(2)).sum::<f64>() / nf;
            out.mardia_skewness = Some(b1);
            out.mardia_skewness_stat = Some(nf * b1 / 6.0);
            out.mardia_kurtosis = Some(b2);
            out.mardia_kurtosis_z = Some((b2 - pf * (pf + 2.0)) / (8.0 * pf * (pf + 2.0) / nf).sqrt());
        }
    }
    if sigma.clone().cholesky().is_none() {
        let msg = "model covariance of the reduced coordinates is singular";
        out.note = Some(match out.note.take() {
            Some(n) => format!("{n}; {msg}"),
            None => msg.into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ZeroFeedback;
    use crate::rng::stream_rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn target(d: usize) -> GaussMarkovMoments {
        let q = build_q(d).unwrap();
        let mut lr = DMatrix::zeros(d, d);
        for i in 0..d - 1 {
            lr[(i, i)] = 1.0 + i as f64;
            if i > 0 {
                lr[(i, i - 1)] = 0.5;
            }
        }
        let cov_red = &lr * lr.transpose();
        let cov = &q * cov_red * q.transpose();
        let mut mean = DVector::zeros(d);
        mean[0] = 1.0;
        mean[1] = -1.0;
        GaussMarkovMoments {
            t_grid: vec![0.0],
            mean: vec![mean],
            cov: vec![cov],
        }
    }

    fn draw(m: &GaussMarkovMoments, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = m.final_mean().len();
        let q = build_q(d).unwrap();
        let qr = q.columns(0, d - 1).into_owned();
        let sig = qr.transpose() * m.final_cov() * &qr;
        let l = sig.cholesky().unwrap().l();
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|_| {
                let xi = DVector::from_fn(d - 1, |_, _| StandardNormal.sample(&mut rng));
                let v = m.final_mean() + &qr * (&l * xi);
                v.as_slice().to_vec()
            })
            .collect()
    }

    #[test]
    fn exact_gaussian_samples_fit() {
        let m = target(4);
        let mut errs = Vec::new();
        for n in [400, 6400] {
            let g = gaussian_diagnostics(&draw(&m, n, 3), &m, &Policy::Uncontrolled).unwrap();
            assert_eq!(g.dim, 3);
            assert!(g.cov_rel_frobenius_error < 3.0 / (n as f64).sqrt(), "{g:?}");
            assert!(g.max_abs_standardized_mean_error < 4.0);
            assert!(g.mardia_kurtosis_z.unwrap().abs() < 4.0);
            errs.push(g.cov_rel_frobenius_error);
        }
        assert!(errs[1] < errs[0]);
    }

    #[test]
    fn refuses_controlled_and_small_samples() {
        let m = target(3);
        let pol = Policy::Feedback(Arc::new(ZeroFeedback { dim: 1 }));
        let e = gaussian_diagnostics(&draw(&m, 200, 1), &m, &pol).unwrap_err();
        assert!(e.to_string().contains("uncontrolled"));
        assert!(gaussian_diagnostics(&draw(&m, 50, 1), &m, &Policy::Uncontrolled).is_err());
    }

    #[test]
    fn degenerate_samples_are_reported() {
        let m = target(3);
        let samples = vec![vec![0.0; 3]; 150];
        let g = gaussian_diagnostics(&samples, &m, &Policy::Uncontrolled).unwrap();
        assert!(g.note.unwrap().contains("singular"));
        assert!(g.mardia_kurtosis.is_none());
    }

    #[test]
    fn reduction_formula() {
        assert!((reduction_pct(8.9556, 8.3809) - 6.4172).abs() < 1e-3);
        assert_eq!(reduction_pct(2.0, 2.0), 0.0);
    }
}
