//! Finite-sample checks of the standing regularity assumptions on a model
//! along a solved fluid path.
//!
//! None of these prove anything. They sample the relevant suprema on a small
//! lattice of `(t, N, y, u)` and report the worst point, so a mis-specified
//! rate closure shows up early.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::fluid::FluidPath;
use crate::model::{nearest_lattice_counts, ModelSpec};

/// Where the checks are sampled.
#[derive(Clone, Debug)]
pub struct ConditionGrid {
    /// Times at which `ξ = μ(t)` is taken.
    pub times: Vec<f64>,
    /// Population sizes, increasing.
    pub n_values: Vec<usize>,
    /// Radii `‖y‖` of the fluctuation offsets.
    pub y_radii: Vec<f64>,
    /// Step of the finite-difference Lipschitz probe.
    pub fd_step: f64,
}

impl ConditionGrid {
    /// `n_times` equally spaced times on `[0, T]` and a default lattice.
    pub fn uniform(horizon: f64, n_times: usize) -> Self {
        let n_times = n_times.max(1);
        let times = if n_times == 1 {
            vec![0.0]
        } else {
            (0..n_times)
                .map(|i| horizon * i as f64 / (n_times - 1) as f64)
                .collect()
        };
        Self {
            times,
            n_values: vec![100, 10_000, 1_000_000],
            y_radii: vec![0.0, 0.5, 2.0],
            fd_step: 1e-4,
        }
    }

    /// Same lattice, times restricted to `(0, T]`.
    pub fn excluding_origin(horizon: f64, n_times: usize) -> Self {
        let mut g = Self::uniform(horizon, n_times + 1);
        g.times.remove(0);
        g
    }
}

/// A sampled point at which a check attains its worst value.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Witness {
    pub t: f64,
    pub n: Option<usize>,
    pub transition: Option<usize>,
    pub y_norm: Option<f64>,
    pub u: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub name: String,
    pub pass: bool,
    /// The sampled supremum (or infimum for positivity checks).
    pub value: f64,
    /// The same quantity per entry of `n_values`, where it depends on `N`.
    pub per_n: Vec<f64>,
    pub witness: Option<Witness>,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub model: String,
    /// Sampled `√N |Γ_N/N − Γ| / (1 + ‖y‖)`.
    pub tightness: ConditionCheck,
    /// Sampled `|β_k^N|` on the compact lattice.
    pub drift_residual: ConditionCheck,
    /// Rank of `{e_ν : ν ∈ Δ*}`.
    pub span_rank: usize,
    /// `κ` together with the rank test.
    pub nondegeneracy: ConditionCheck,
    /// Finite-difference Lipschitz estimate of the limit rates.
    pub lipschitz: ConditionCheck,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.checks().iter().all(|c| c.pass)
    }

    pub fn checks(&self) -> [&ConditionCheck; 4] {
        [
            &self.tightness,
            &self.drift_residual,
            &self.nondegeneracy,
            &self.lipschitz,
        ]
    }
}

const RANK_TOL: f64 = 1e-9;

/// Reduced controls probed: zero, each single-coordinate corner, and the two
/// diagonal corners.
fn control_lattice(spec: &ModelSpec) -> Vec<Vec<f64>> {
    let bx = spec.control_box();
    let dim = bx.dim();
    let mut out = vec![vec![0.0; dim]];
    for c in 0..dim {
        for v in [bx.lo[c], bx.hi[c]] {
            let mut u = vec![0.0; dim];
            u[c] = v;
            out.push(u);
        }
    }
    if dim > 1 {
        out.push(bx.lo.clone());
        out.push(bx.hi.clone());
    }
    out.dedup();
    out
}

/// Unit zero-sum directions `(e_a − e_{a+1})/√2`, cyclically.
fn directions(d: usize) -> Vec<Vec<f64>> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..d)
        .map(|a| {
            let mut w = vec![0.0; d];
            w[a] += s;
            w[(a + 1) % d] -= s;
            w
        })
        .collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct Sample {
    value: f64,
    witness: Witness,
}

fn keep_max(slot: &mut Option<Sample>, value: f64, witness: impl FnOnce() -> Witness) {
    // NaN must win so a broken closure cannot hide.
    let better = match slot {
        None => true,
        Some(s) => value.is_nan() || value > s.value,
    };
    if better && !slot.as_ref().is_some_and(|s| s.value.is_nan()) {
        *slot = Some(Sample {
            value,
            witness: witness(),
        });
    }
}

/// Runs all checks. Failures are reported, never raised.
pub fn validate_conditions(spec: &ModelSpec, fluid: &FluidPath, grid: &ConditionGrid) -> ConditionReport {
    let d = spec.d();
    let ell = spec.ell();
    let controls = control_lattice(spec);
    let dirs = directions(d);
    let mut xi = vec![0.0; d];
    let mut h2 = vec![0.0; d];

    let mut tight: Vec<Option<Sample>> = grid.n_values.iter().map(|_| None).collect();
    let mut resid: Vec<Option<Sample>> = grid.n_values.iter().map(|_| None).collect();
    let mut kappa: Option<Sample> = None;
    let mut lip: Option<Sample> = None;
    let mut lip_half: Option<Sample> = None;

    for &t in &grid.times {
        fluid.eval_into(t, &mut xi);
        let base: Vec<f64> = (0..ell).map(|id| spec.base_rate_unchecked(&xi, id)).collect();

        for &id in spec.nondegenerate() {
            let v = base[id];
            let worse = kappa.as_ref().map_or(true, |s| v < s.value || v.is_nan());
            if worse {
                kappa = Some(Sample {
                    value: v,
                    witness: Witness {
                        t,
                        transition: Some(id),
                        ..Witness::default()
                    },
                });
            }
        }

        for (ni, &n) in grid.n_values.iter().enumerate() {
            let sn = (n as f64).sqrt();
            let mut offsets: Vec<Vec<f64>> = vec![vec![0.0; d]];
            for &rad in grid.y_radii.iter().filter(|&&r| r > 0.0) {
                for w in &dirs {
                    offsets.push(w.iter().map(|x| x * rad).collect());
                }
            }
            for y0 in offsets {
                // Snap ξ + y0/√N onto S_N and recompute y from the snapped point.
                let target: Vec<f64> = xi.iter().zip(&y0).map(|(a, b)| a + b / sn).collect();
                if target.iter().any(|&x| x < 0.0) {
                    continue;
                }
                let counts = nearest_lattice_counts(&target, n);
                let r: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
                let y: Vec<f64> = r.iter().zip(&xi).map(|(a, b)| sn * (a - b)).collect();
                let ynorm = norm(&y);
                for u in &controls {
                    for id in 0..ell {
                        let uc = spec.control_component(u, id, n);
                        let rate_n = spec.prelimit_rate_raw(n, &r, uc, id) / n as f64;
                        let diff = sn * (rate_n - base[id]);
                        let witness = || Witness {
                            t,
                            n: Some(n),
                            transition: Some(id),
                            y_norm: Some(ynorm),
                            u: Some(u.clone()),
                        };
                        keep_max(&mut tight[ni], diff.abs() / (1.0 + ynorm), witness);

                        h2.iter_mut().for_each(|x| *x = 0.0);
                        spec.h2(&xi, id, &mut h2);
                        let u_full = spec.control_coord(id).map_or(0.0, |c| u[c]);
                        let h = spec.h1(&xi, id) * u_full
                            + h2.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
                        keep_max(&mut resid[ni], (diff - h).abs(), witness);
                    }
                }
            }
        }

        // Lipschitz probe along each direction, at two step sizes.
        for (step, slot) in [(grid.fd_step, &mut lip), (grid.fd_step / 2.0, &mut lip_half)] {
            for w in &dirs {
                let r: Vec<f64> = xi.iter().zip(w).map(|(a, b)| a + step * b).collect();
                if r.iter().any(|&x| x < 0.0) {
                    continue;
                }
                for id in 0..ell {
                    let q = (spec.base_rate_unchecked(&r, id) - base[id]).abs() / step;
                    keep_max(slot, q, || Witness {
                        t,
                        transition: Some(id),
                        ..Witness::default()
                    });
                }
            }
        }
    }

    let per_n = |v: &[Option<Sample>]| -> Vec<f64> {
        v.iter().map(|s| s.as_ref().map_or(f64::NAN, |s| s.value)).collect()
    };
    let worst = |v: Vec<Option<Sample>>| -> Option<Sample> {
        v.into_iter().flatten().fold(None, |acc: Option<Sample>, s| match acc {
            Some(a) if !(s.value > a.value || s.value.is_nan()) => Some(a),
            _ => Some(s),
        })
    };

    let tight_n = per_n(&tight);
    let tightness = {
        let first = tight_n.first().copied().unwrap_or(f64::NAN);
        let last = tight_n.last().copied().unwrap_or(f64::NAN);
        let finite = tight_n.iter().all(|v| v.is_finite());
        let pass = finite && last <= 2.0 * first + 1e-12;
        let w = worst(tight);
        ConditionCheck {
            name: "tightness".into(),
            pass,
            value: w.as_ref().map_or(f64::NAN, |s| s.value),
            per_n: tight_n,
            witness: w.map(|s| s.witness),
            message: if pass {
                "bound stays flat in N".into()
            } else if !finite {
                "non-finite or unsampled rate".into()
            } else {
                format!("sampled bound grows with N: {first:.3e} -> {last:.3e}")
            },
        }
    };

    let resid_n = per_n(&resid);
    let drift_residual = {
        let first = resid_n.first().copied().unwrap_or(f64::NAN);
        let last = resid_n.last().copied().unwrap_or(f64::NAN);
        let finite = resid_n.iter().all(|v| v.is_finite());
        let pass = finite && (last <= 0.5 * first || resid_n.iter().all(|&v| v <= 1e-9));
        let w = worst(resid);
        ConditionCheck {
            name: "drift_residual".into(),
            pass,
            value: w.as_ref().map_or(f64::NAN, |s| s.value),
            per_n: resid_n,
            witness: w.map(|s| s.witness),
            message: if pass {
                format!("residual decays in N: {first:.3e} -> {last:.3e}")
            } else {
                format!("residual does not decay: {first:.3e} -> {last:.3e}")
            },
        }
    };

    let span_rank = {
        let cols: Vec<f64> = spec
            .nondegenerate()
            .iter()
            .flat_map(|&id| spec.transitions()[id].shift.iter().map(|&s| s as f64))
            .collect();
        if cols.is_empty() {
            0
        } else {
            DMatrix::from_column_slice(d, spec.nondegenerate().len(), &cols).rank(RANK_TOL)
        }
    };
    let nondegeneracy = {
        let rank_ok = span_rank == d - 1;
        let k = kappa.as_ref().map_or(f64::NAN, |s| s.value);
        let pass = rank_ok && k > 0.0;
        ConditionCheck {
            name: "nondegeneracy".into(),
            pass,
            value: k,
            per_n: Vec::new(),
            witness: kappa.map(|s| s.witness),
            message: if !rank_ok {
                format!("Δ* spans a space of dimension {span_rank}, need d − 1 = {}", d - 1)
            } else if pass {
                format!("κ = {k:.4e}")
            } else {
                format!("κ = {k:.4e} is not positive")
            },
        }
    };

    let lipschitz = {
        let a = lip.as_ref().map_or(f64::NAN, |s| s.value);
        let b = lip_half.as_ref().map_or(f64::NAN, |s| s.value);
        let pass = a.is_finite() && b.is_finite() && b <= 2.0 * a + 1e-9;
        ConditionCheck {
            name: "lipschitz".into(),
            pass,
            value: a.max(b),
            per_n: Vec::new(),
            witness: lip.map(|s| s.witness),
            message: if pass {
                format!("difference quotients {a:.3e}, {b:.3e}")
            } else {
                format!("difference quotients blow up: {a:.3e} -> {b:.3e}")
            },
        }
    };

    ConditionReport {
        model: spec.name().to_string(),
        tightness,
        drift_residual,
        span_rank,
        nondegeneracy,
        lipschitz,
    }
}
