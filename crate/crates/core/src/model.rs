//! Generic controlled jump-Markov model.
//!
//! A model is a finite per-particle state space `{0, .., d-1}` together with a
//! list of transition types. Each type `k` allows at most `n_k` particles to
//! move simultaneously and carries a list of jump vectors `ν = (I, J)`: `I_x`
//! particles leave state `x` and `J_y` particles arrive in state `y`. The
//! empirical measure moves by `e_ν / N` where `e_ν = J - I`.
//!
//! Rates are supplied as closures indexed by the flat transition id returned
//! by [`enumerate_transitions`]. That flat order is the coordinate order of
//! the full control vector `u ∈ Λ ⊂ R^ℓ` everywhere downstream.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Absolute per-coordinate tolerance for simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Limit rate `Γ^k(r, ν)`, called as `(r, transition id)`.
pub type BaseRateFn = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;
/// Controlled prelimit rate `Γ_N^k(r, u, ν)`, called as
/// `(N, r, u_{k,ν}, transition id)` where `u_{k,ν}` is the transition's own
/// coordinate of the control, already scaled into `Λ_N = Λ / √N`.
pub type PrelimitRateFn = Arc<dyn Fn(usize, &[f64], f64, usize) -> f64 + Send + Sync>;
/// `h_1^k(ν, r)`, called as `(r, transition id)`.
pub type H1Fn = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;
/// `h_2^k(ν, r)`, written into a zeroed length-`d` buffer.
pub type H2Fn = Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;

/// A simultaneous move `ν = (I, J)` of particles between states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JumpVector {
    pub from: Vec<u32>,
    pub to: Vec<u32>,
}

impl JumpVector {
    pub fn new(from: Vec<u32>, to: Vec<u32>) -> Self {
        Self { from, to }
    }

    /// Jump moving one particle from state `a` to state `b`.
    pub fn single(d: usize, a: usize, b: usize) -> Self {
        let mut from = vec![0; d];
        let mut to = vec![0; d];
        from[a] += 1;
        to[b] += 1;
        Self { from, to }
    }

    /// `e_ν = Σ_x (J_x - I_x) e_x`.
    pub fn shift(&self) -> Vec<i32> {
        self.from
            .iter()
            .zip(&self.to)
            .map(|(&i, &j)| j as i32 - i as i32)
            .collect()
    }

    pub fn participants(&self) -> u32 {
        self.from.iter().sum()
    }
}

impl fmt::Display for JumpVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(I={:?}, J={:?})", self.from, self.to)
    }
}

/// One transition type `k` with its jump set `Δ^k`.
#[derive(Clone, Debug)]
pub struct TransitionType {
    pub name: String,
    pub max_participants: u32,
    pub jumps: Vec<JumpVector>,
}

/// A flattened `(k, ν)` pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transition {
    pub kind: usize,
    pub local: usize,
    pub shift: Vec<i32>,
    /// Nonzero entries of `shift` as `(state, delta)`.
    pub sparse: Vec<(usize, i32)>,
}

/// Flattens and validates the jump sets of all types, in type order then
/// jump order.
pub fn enumerate_transitions(d: usize, types: &[TransitionType]) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for (k, ty) in types.iter().enumerate() {
        for (n, nu) in ty.jumps.iter().enumerate() {
            let bad = |reason: String| Error::InvalidJump {
                kind: k,
                jump: n,
                reason: format!("{reason}; ν = {nu}"),
            };
            if nu.from.len() != d || nu.to.len() != d {
                return Err(bad(format!("vectors must have length d = {d}")));
            }
            let moved_out: u32 = nu.from.iter().sum();
            let moved_in: u32 = nu.to.iter().sum();
            if moved_out != moved_in {
                return Err(bad(format!("Σ I = {moved_out} differs from Σ J = {moved_in}")));
            }
            if moved_out > ty.max_participants {
                return Err(bad(format!(
                    "Σ I = {moved_out} exceeds n_k = {}",
                    ty.max_participants
                )));
            }
            let shift = nu.shift();
            if shift.iter().all(|&s| s == 0) {
                return Err(bad("jump leaves the empirical measure unchanged".into()));
            }
            let sparse = shift
                .iter()
                .enumerate()
                .filter(|(_, &s)| s != 0)
                .map(|(m, &s)| (m, s))
                .collect();
            out.push(Transition {
                kind: k,
                local: n,
                shift,
                sparse,
            });
        }
    }
    Ok(out)
}

/// Per-coordinate interval bounds of the reduced control.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ControlBox {
    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&x, (&lo, &hi))| x >= lo - tol && x <= hi + tol)
    }

    /// Projects `u` onto the box coordinatewise; returns whether any
    /// coordinate moved.
    pub fn clamp(&self, u: &mut [f64]) -> bool {
        let mut moved = false;
        for (x, (&lo, &hi)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            let c = x.clamp(lo, hi);
            if c != *x {
                moved = true;
                *x = c;
            }
        }
        moved
    }
}

/// Everything needed to assemble a [`ModelSpec`].
pub struct ModelParts {
    pub name: String,
    pub d: usize,
    pub state_labels: Vec<String>,
    pub types: Vec<TransitionType>,
    pub base_rate: BaseRateFn,
    pub prelimit_rate: PrelimitRateFn,
    pub h1: H1Fn,
    pub h2: H2Fn,
    /// For each flat transition, the reduced control coordinate its full
    /// control entry is tied to, or `None` when the entry is fixed at 0.
    pub control_coord: Vec<Option<usize>>,
    pub control_box: ControlBox,
    /// Flat ids of the transitions in `Δ*`.
    pub nondegenerate: Vec<usize>,
}

/// A validated controlled jump system.
pub struct ModelSpec {
    name: String,
    d: usize,
    state_labels: Vec<String>,
    types: Vec<TransitionType>,
    transitions: Vec<Transition>,
    base_rate: BaseRateFn,
    prelimit_rate: PrelimitRateFn,
    h1: H1Fn,
    h2: H2Fn,
    control_coord: Vec<Option<usize>>,
    multiplicity: Vec<usize>,
    control_box: ControlBox,
    nondegenerate: Vec<usize>,
    negative_rate_clamps: AtomicU64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("transitions", &self.transitions.len())
            .field("control_dim", &self.control_box.dim())
            .finish()
    }
}

impl ModelSpec {
    pub fn new(parts: ModelParts) -> Result<Self> {
        let ModelParts {
            name,
            d,
            state_labels,
            types,
            base_rate,
            prelimit_rate,
            h1,
            h2,
            control_coord,
            control_box,
            nondegenerate,
        } = parts;
        if d < 2 {
            return Err(Error::Model(format!("state count d = {d} must be at least 2")));
        }
        if state_labels.len() != d {
            return Err(Error::Model(format!(
                "{} state labels for d = {d}",
                state_labels.len()
            )));
        }
        let transitions = enumerate_transitions(d, &types)?;
        if control_coord.len() != transitions.len() {
            return Err(Error::Model(format!(
                "control embedding has {} entries but ℓ = {}",
                control_coord.len(),
                transitions.len()
            )));
        }
        if control_box.lo.len() != control_box.hi.len() {
            return Err(Error::Model("control box bounds differ in length".into()));
        }
        let dim = control_box.dim();
        let mut multiplicity = vec![0; dim];
        for c in control_coord.iter().flatten() {
            if *c >= dim {
                return Err(Error::Model(format!(
                    "control coordinate {c} outside reduced dimension {dim}"
                )));
            }
            multiplicity[*c] += 1;
        }
        if control_box
            .lo
            .iter()
            .zip(&control_box.hi)
            .any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
        {
            return Err(Error::Model("control box must be a finite nonempty box".into()));
        }
        if let Some(&bad) = nondegenerate.iter().find(|&&id| id >= transitions.len()) {
            return Err(Error::Model(format!("Δ* references unknown transition {bad}")));
        }
        Ok(Self {
            name,
            d,
            state_labels,
            types,
            transitions,
            base_rate,
            prelimit_rate,
            h1,
            h2,
            control_coord,
            multiplicity,
            control_box,
            nondegenerate,
            negative_rate_clamps: AtomicU64::new(0),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn state_labels(&self) -> &[String] {
        &self.state_labels
    }

    pub fn types(&self) -> &[TransitionType] {
        &self.types
    }

    /// Flat `(k, ν)` list; index = transition id.
    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// `ℓ = Σ_k |Δ^k|`.
    pub fn ell(&self) -> usize {
        self.transitions.len()
    }

    pub fn jump(&self, id: usize) -> &JumpVector {
        let tr = &self.transitions[id];
        &self.types[tr.kind].jumps[tr.local]
    }

    pub fn control_dim(&self) -> usize {
        self.control_box.dim()
    }

    pub fn control_box(&self) -> &ControlBox {
        &self.control_box
    }

    pub fn control_coord(&self, id: usize) -> Option<usize> {
        self.control_coord[id]
    }

    /// Number of full control coordinates tied to each reduced coordinate.
    pub fn multiplicity(&self) -> &[usize] {
        &self.multiplicity
    }

    /// Embeds reduced coordinates into the full `ℓ`-vector.
    pub fn control_embed(&self, u_reduced: &[f64]) -> Vec<f64> {
        self.control_coord
            .iter()
            .map(|c| c.map_or(0.0, |c| u_reduced[c]))
            .collect()
    }

    pub fn nondegenerate(&self) -> &[usize] {
        &self.nondegenerate
    }

    pub fn negative_rate_clamps(&self) -> u64 {
        self.negative_rate_clamps.load(Ordering::Relaxed)
    }

    /// `Γ^k(r, ν)` without simplex checks; for inner loops.
    #[inline]
    pub fn base_rate_unchecked(&self, r: &[f64], id: usize) -> f64 {
        (self.base_rate)(r, id)
    }

    /// `Γ_N^k(r, u, ν)` with `u_component` already in `Λ_N`, no checks and
    /// no clamping.
    #[inline]
    pub fn prelimit_rate_raw(&self, n: usize, r: &[f64], u_component: f64, id: usize) -> f64 {
        (self.prelimit_rate)(n, r, u_component, id)
    }

    #[inline]
    pub fn h1(&self, r: &[f64], id: usize) -> f64 {
        (self.h1)(r, id)
    }

    #[inline]
    pub fn h2(&self, r: &[f64], id: usize, out: &mut [f64]) {
        (self.h2)(r, id, out)
    }

    /// Limit rate `Γ^k(r, ν)` at a simplex point.
    pub fn eval_base_rate(&self, r: &[f64], id: usize) -> Result<f64> {
        check_simplex(r, self.d)?;
        self.check_id(id)?;
        let rate = (self.base_rate)(r, id);
        if !(rate >= 0.0) {
            return Err(Error::Model(format!(
                "limit rate of transition {id} is {rate} at r = {r:?}"
            )));
        }
        Ok(rate)
    }

    /// Controlled prelimit rate `Γ_N^k(r, u/√N, ν)` for a reduced control
    /// `u_reduced` in the control box. Negative values are clamped to zero
    /// and counted.
    pub fn eval_prelimit_rate(
        &self,
        n: usize,
        r: &[f64],
        u_reduced: &[f64],
        id: usize,
    ) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        check_lattice(r, n, self.d)?;
        self.check_id(id)?;
        if !self.control_box.contains(u_reduced, 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "control {u_reduced:?} outside the control box"
            )));
        }
        let u = self.control_component(u_reduced, id, n);
        Ok(self.clamped_prelimit_rate(n, r, u, id))
    }

    /// Full control entry `u_{k,ν}` scaled into `Λ_N`.
    #[inline]
    pub fn control_component(&self, u_reduced: &[f64], id: usize, n: usize) -> f64 {
        self.control_coord[id].map_or(0.0, |c| u_reduced[c] / (n as f64).sqrt())
    }

    #[inline]
    pub(crate) fn clamped_prelimit_rate(&self, n: usize, r: &[f64], u: f64, id: usize) -> f64 {
        let rate = (self.prelimit_rate)(n, r, u, id);
        if rate < 0.0 {
            self.negative_rate_clamps.fetch_add(1, Ordering::Relaxed);
            0.0
        } else {
            rate
        }
    }

    #[inline]
    pub(crate) fn note_negative_rate(&self) {
        self.negative_rate_clamps.fetch_add(1, Ordering::Relaxed);
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.transitions.len() {
            return Err(Error::InvalidArgument(format!(
                "transition id {id} out of range (ℓ = {})",
                self.transitions.len()
            )));
        }
        Ok(())
    }
}

/// Checks `r` lies on the simplex within [`SIMPLEX_TOL`] per coordinate.
pub fn check_simplex(r: &[f64], d: usize) -> Result<()> {
    if r.len() != d {
        return Err(Error::InvalidArgument(format!(
            "point has length {} but d = {d}",
            r.len()
        )));
    }
    if let Some((m, x)) = r.iter().enumerate().find(|(_, &x)| !(x >= -SIMPLEX_TOL)) {
        return Err(Error::InvalidArgument(format!(
            "coordinate {m} = {x} is negative"
        )));
    }
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL * d as f64 {
        return Err(Error::InvalidArgument(format!(
            "coordinates sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Checks `r ∈ S_N`: on the simplex with `N r` integral.
pub fn check_lattice(r: &[f64], n: usize, d: usize) -> Result<()> {
    check_simplex(r, d)?;
    let nf = n as f64;
    if let Some((m, x)) = r
        .iter()
        .enumerate()
        .find(|(_, &x)| ((x * nf) - (x * nf).round()).abs() > 1e-6)
    {
        return Err(Error::InvalidArgument(format!(
            "coordinate {m} = {x} is not a multiple of 1/{n}"
        )));
    }
    Ok(())
}

/// Nearest point of `S_N` to a simplex point, by largest-remainder rounding
/// of `N x`. Returns the integer counts.
pub fn nearest_lattice_counts(x: &[f64], n: usize) -> Vec<i64> {
    let nf = n as f64;
    let scaled: Vec<f64> = x.iter().map(|&v| v.max(0.0) * nf).collect();
    let mut counts: Vec<i64> = scaled.iter().map(|v| v.floor() as i64).collect();
    let assigned: i64 = counts.iter().sum();
    let mut deficit = n as i64 - assigned;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut k = 0;
    while deficit > 0 {
        counts[order[k % order.len()]] += 1;
        deficit -= 1;
        k += 1;
    }
    let mut k = 0;
    while deficit < 0 {
        let m = order[order.len() - 1 - (k % order.len())];
        if counts[m] > 0 {
            counts[m] -= 1;
            deficit += 1;
        }
        k += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::two_state::{two_state_model, TwoStateParams};

    #[test]
    fn two_state_shifts() {
        let m = two_state_model(&TwoStateParams::default()).unwrap();
        let tr = m.transitions();
        assert_eq!(m.ell(), 2);
        assert_eq!(tr[0].shift, vec![-1, 1]);
        assert_eq!(tr[1].shift, vec![1, -1]);
    }

    #[test]
    fn rejects_jump_with_too_many_participants() {
        let ty = TransitionType {
            name: "bad".into(),
            max_participants: 1,
            jumps: vec![JumpVector::new(vec![1, 1, 0], vec![0, 0, 2])],
        };
        match enumerate_transitions(3, &[ty]) {
            Err(Error::InvalidJump { kind: 0, jump: 0, reason }) => {
                assert!(reason.contains("exceeds n_k"), "{reason}")
            }
            other => panic!("expected InvalidJump, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unbalanced_and_null_jumps() {
        let unbalanced = TransitionType {
            name: "u".into(),
            max_participants: 2,
            jumps: vec![JumpVector::new(vec![1, 0], vec![1, 1])],
        };
        assert!(enumerate_transitions(2, &[unbalanced]).is_err());
        let null = TransitionType {
            name: "n".into(),
            max_participants: 2,
            jumps: vec![JumpVector::new(vec![1, 0], vec![1, 0])],
        };
        assert!(enumerate_transitions(2, &[null]).is_err());
    }

    #[test]
    fn base_rate_two_state() {
        let m = two_state_model(&TwoStateParams::default()).unwrap();
        assert_eq!(m.eval_base_rate(&[0.5, 0.5], 0).unwrap(), 0.5);
        assert!(m.eval_base_rate(&[0.6, 0.5], 0).is_err());
    }

    #[test]
    fn prelimit_rate_two_state() {
        let m = two_state_model(&TwoStateParams::default()).unwrap();
        let rate = m.eval_prelimit_rate(100, &[0.4, 0.6], &[1.0], 0).unwrap();
        assert!((rate - 44.0).abs() < 1e-12);
        let zero = m.eval_prelimit_rate(100, &[0.4, 0.6], &[0.0], 0).unwrap();
        assert_eq!(zero, 40.0);
        // Not a multiple of 1/N.
        assert!(m.eval_prelimit_rate(100, &[0.405, 0.595], &[0.0], 0).is_err());
        // Outside the box.
        assert!(m.eval_prelimit_rate(100, &[0.4, 0.6], &[99.0], 0).is_err());
    }

    #[test]
    fn negative_rates_are_clamped_and_counted() {
        let params = TwoStateParams {
            lambda: 0.1,
            tau: 1.0,
            d_box: 5.0,
        };
        let m = two_state_model(&params).unwrap();
        let rate = m.eval_prelimit_rate(4, &[0.5, 0.5], &[-5.0], 0).unwrap();
        assert_eq!(rate, 0.0);
        assert_eq!(m.negative_rate_clamps(), 1);
    }

    #[test]
    fn ordering_is_deterministic() {
        let a = two_state_model(&TwoStateParams::default()).unwrap();
        let b = two_state_model(&TwoStateParams::default()).unwrap();
        assert_eq!(a.transitions(), b.transitions());
    }

    #[test]
    fn lattice_rounding_preserves_total() {
        let x = [0.333, 0.333, 0.334];
        let c = nearest_lattice_counts(&x, 10);
        assert_eq!(c.iter().sum::<i64>(), 10);
        let c = nearest_lattice_counts(&[0.5, 0.5], 10_000);
        assert_eq!(c, vec![5000, 5000]);
    }
}
