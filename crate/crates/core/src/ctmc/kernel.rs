//! Event kernels: per-state rate bounds and candidate selection.

use rand::Rng;

use crate::model::ModelSpec;

/// A proposed transition and the bound rate it was drawn with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub id: usize,
    pub bound: f64,
}

/// Rate structure of the `N`-particle empirical-measure chain as seen by the
/// thinning simulator.
///
/// Bounds depend only on the integer state: for controlled kernels they are
/// the supremum of `Γ_N^k(r, u, ν)` over the control box, otherwise the
/// nominal rates themselves.
pub trait EventKernel: Sync {
    type Scratch: Send;

    fn dim(&self) -> usize;

    /// Population size `N`.
    fn population(&self) -> usize;

    /// Whether bounds cover the whole control box.
    fn controlled(&self) -> bool;

    fn new_scratch(&self) -> Self::Scratch;

    /// Recomputes bounds for `counts`; returns their total.
    fn refresh(&self, scratch: &mut Self::Scratch, counts: &[i64]) -> f64;

    /// Draws a transition with probability proportional to its bound.
    fn propose<R: Rng + ?Sized>(
        &self,
        scratch: &Self::Scratch,
        counts: &[i64],
        rng: &mut R,
    ) -> Candidate;

    /// `Γ_N^k(r, u/√N, ν)` for transitions whose rate depends on the control;
    /// `None` for the rest, which are always accepted.
    fn controlled_rate(&self, counts: &[i64], id: usize, u_reduced: &[f64]) -> Option<f64>;

    /// Nonzero entries of `e_ν`.
    fn shift(&self, id: usize) -> &[(usize, i32)];
}

/// Kernel driven directly by a [`ModelSpec`]'s rate closures.
///
/// Every bound is recomputed after each accepted event and candidates are
/// found by linear scan, so this is meant for models with few transitions.
/// The control bound is taken at the box corners, which is exact when each
/// controlled rate is monotone in its control coordinate.
pub struct GenericKernel<'a> {
    spec: &'a ModelSpec,
    n: usize,
    controlled: bool,
}

pub struct GenericScratch {
    r: Vec<f64>,
    bounds: Vec<f64>,
    total: f64,
}

impl<'a> GenericKernel<'a> {
    pub fn new(spec: &'a ModelSpec, n: usize, controlled: bool) -> Self {
        Self {
            spec,
            n,
            controlled,
        }
    }
}

impl EventKernel for GenericKernel<'_> {
    type Scratch = GenericScratch;

    fn dim(&self) -> usize {
        self.spec.d()
    }

    fn population(&self) -> usize {
        self.n
    }

    fn controlled(&self) -> bool {
        self.controlled
    }

    fn new_scratch(&self) -> GenericScratch {
        GenericScratch {
            r: vec![0.0; self.spec.d()],
            bounds: vec![0.0; self.spec.ell()],
            total: 0.0,
        }
    }

    fn refresh(&self, s: &mut GenericScratch, counts: &[i64]) -> f64 {
        let nf = self.n as f64;
        for (r, &c) in s.r.iter_mut().zip(counts) {
            *r = c as f64 / nf;
        }
        let sqrt_n = nf.sqrt();
        let cbox = self.spec.control_box();
        let mut total = 0.0;
        for id in 0..self.spec.ell() {
            let b = match (self.controlled, self.spec.control_coord(id)) {
                (true, Some(c)) => {
                    let lo = self.spec.clamped_prelimit_rate(self.n, &s.r, cbox.lo[c] / sqrt_n, id);
                    let hi = self.spec.clamped_prelimit_rate(self.n, &s.r, cbox.hi[c] / sqrt_n, id);
                    lo.max(hi)
                }
                _ => self.spec.clamped_prelimit_rate(self.n, &s.r, 0.0, id),
            };
            s.bounds[id] = b;
            total += b;
        }
        s.total = total;
        total
    }

    fn propose<R: Rng + ?Sized>(&self, s: &GenericScratch, _counts: &[i64], rng: &mut R) -> Candidate {
        let target = rng.random::<f64>() * s.total;
        let mut acc = 0.0;
        let mut last = 0;
        for (id, &b) in s.bounds.iter().enumerate() {
            if b > 0.0 {
                acc += b;
                last = id;
                if target < acc {
                    return Candidate { id, bound: b };
                }
            }
        }
        Candidate {
            id: last,
            bound: s.bounds[last],
        }
    }

    fn controlled_rate(&self, counts: &[i64], id: usize, u_reduced: &[f64]) -> Option<f64> {
        if !self.controlled {
            return None;
        }
        let c = self.spec.control_coord(id)?;
        let nf = self.n as f64;
        let r: Vec<f64> = counts.iter().map(|&x| x as f64 / nf).collect();
        Some(
            self.spec
                .clamped_prelimit_rate(self.n, &r, u_reduced[c] / nf.sqrt(), id),
        )
    }

    fn shift(&self, id: usize) -> &[(usize, i32)] {
        &self.spec.transitions()[id].sparse
    }
}
