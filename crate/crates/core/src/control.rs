//! Feedback laws, policies and running costs shared by both simulators.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::model::ControlBox;

/// A feedback map `g(t, y)` into the reduced control box.
pub trait FeedbackLaw: Send + Sync {
    fn control_dim(&self) -> usize;

    /// Writes `g(t, y)` into `out`; returns whether box truncation was
    /// active.
    fn eval(&self, t: f64, y: &[f64], out: &mut [f64]) -> bool;
}

/// `g ≡ 0`.
#[derive(Clone, Debug)]
pub struct ZeroFeedback {
    pub dim: usize,
}

impl FeedbackLaw for ZeroFeedback {
    fn control_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _t: f64, _y: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|x| *x = 0.0);
        false
    }
}

/// Time-invariant linear feedback `clamp(-G y)`; mostly useful in tests.
#[derive(Clone, Debug)]
pub struct ConstantGainFeedback {
    pub gain: DMatrix<f64>,
    pub bounds: Option<ControlBox>,
}

impl FeedbackLaw for ConstantGainFeedback {
    fn control_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn eval(&self, _t: f64, y: &[f64], out: &mut [f64]) -> bool {
        for (c, o) in out.iter_mut().enumerate() {
            *o = -(0..y.len()).map(|k| self.gain[(c, k)] * y[k]).sum::<f64>();
        }
        self.bounds.as_ref().is_some_and(|b| b.clamp(out))
    }
}

/// How controls are chosen in the `N`-particle system.
#[derive(Clone)]
pub enum Policy {
    /// Nominal rates; no thinning.
    Uncontrolled,
    /// `U^N(t) = g(t, V_N(t)) / √N`.
    Feedback(Arc<dyn FeedbackLaw>),
}

impl Policy {
    pub fn is_controlled(&self) -> bool {
        matches!(self, Policy::Feedback(_))
    }
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Uncontrolled => write!(f, "Uncontrolled"),
            Policy::Feedback(g) => write!(f, "Feedback(dim = {})", g.control_dim()),
        }
    }
}

/// Running cost `k_1(v) + k_2(u)`.
pub trait CostFunctional: Send + Sync {
    fn state_cost(&self, v: &[f64]) -> f64;
    fn control_cost(&self, u: &[f64]) -> f64;
}

/// `k_1(v) = ‖v‖²`, `k_2(u) = u' R u` in reduced control coordinates.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    pub control_weight: DMatrix<f64>,
}

impl QuadraticCost {
    /// `R = α I` on the reduced control vector.
    pub fn reduced(alpha: f64, dim: usize) -> Self {
        Self {
            control_weight: DMatrix::from_diagonal_element(dim, dim, alpha),
        }
    }

    /// `R = α diag(multiplicity)`: equal to `α ‖u_full‖²` when each reduced
    /// coordinate is repeated `multiplicity[c]` times in the full vector.
    pub fn from_multiplicity(alpha: f64, multiplicity: &[usize]) -> Self {
        let diag: Vec<f64> = multiplicity.iter().map(|&m| alpha * m as f64).collect();
        Self {
            control_weight: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)),
        }
    }
}

impl CostFunctional for QuadraticCost {
    #[inline]
    fn state_cost(&self, v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum()
    }

    #[inline]
    fn control_cost(&self, u: &[f64]) -> f64 {
        let r = &self.control_weight;
        let mut acc = 0.0;
        for a in 0..u.len() {
            for b in 0..u.len() {
                acc += u[a] * r[(a, b)] * u[b];
            }
        }
        acc
    }
}

/// No running cost at all.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullCost;

impl CostFunctional for NullCost {
    fn state_cost(&self, _v: &[f64]) -> f64 {
        0.0
    }

    fn control_cost(&self, _u: &[f64]) -> f64 {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_cost_matches_full_vector_norm() {
        let cost = QuadraticCost::from_multiplicity(0.01, &[21, 21]);
        let u = [0.3, -0.4];
        let full: f64 = 21.0 * 0.09 + 21.0 * 0.16;
        assert!((cost.control_cost(&u) - 0.01 * full).abs() < 1e-15);
        assert_eq!(cost.state_cost(&[3.0, -4.0]), 25.0);
    }

    #[test]
    fn constant_gain_saturates() {
        let g = ConstantGainFeedback {
            gain: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            bounds: Some(ControlBox::symmetric(1, 5.0)),
        };
        let mut u = [0.0];
        assert!(!g.eval(0.0, &[0.0, 0.0], &mut u));
        assert_eq!(u[0], 0.0);
        assert!(g.eval(0.0, &[100.0, -100.0], &mut u));
        assert_eq!(u[0], -5.0);
    }
}
