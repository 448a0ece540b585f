//! Two-class finite-capacity loss network with job switching.
//!
//! `N` identical servers of capacity `C` host class-1 and class-2 jobs
//! needing `A_1` and `A_2` units. A server's state is its job mix `(j, i)`.
//! Jobs arrive at rate `λ_c` per server, depart at rate `τ_c` each, and at
//! rate `γ_c` each try to move to another server chosen uniformly at random;
//! a move to a server without room loses the job.
//!
//! Transition types, in flat order: `E1, E2` (entries, control on the arrival
//! rates), `L1, L2` (departures), `C1, C2` (switches: first the unsuccessful
//! moves, which share the jump vectors of `L1`/`L2`, then the successful
//! source/target pairs).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{Candidate, EventKernel};
use crate::error::{Error, Result};
use crate::model::{ControlBox, JumpVector, ModelParts, ModelSpec, TransitionType};

const NONE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossNetParams {
    pub capacity: u32,
    pub a1: u32,
    pub a2: u32,
    pub lambda: [f64; 2],
    pub tau: [f64; 2],
    pub gamma: [f64; 2],
    /// Control half-width `D`.
    pub d_box: f64,
}

impl Default for LossNetParams {
    fn default() -> Self {
        Self {
            capacity: 6,
            a1: 1,
            a2: 1,
            lambda: [1.0, 1.0],
            tau: [1.0, 1.0],
            gamma: [1.0, 1.0],
            d_box: 5.0,
        }
    }
}

impl LossNetParams {
    pub fn validate(&self) -> Result<()> {
        let rates = self.lambda.iter().chain(&self.tau).chain(&self.gamma);
        if rates.clone().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "loss-network rates must be positive: {self:?}"
            )));
        }
        if self.a1 == 0 || self.a2 == 0 {
            return Err(Error::InvalidArgument("capacity requirements must be ≥ 1".into()));
        }
        if self.capacity < self.a1.max(self.a2) {
            return Err(Error::InvalidArgument(format!(
                "capacity {} smaller than a job requirement",
                self.capacity
            )));
        }
        if !(self.d_box >= 0.0 && self.d_box.is_finite()) {
            return Err(Error::InvalidArgument("D must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn need(&self, class: usize) -> u32 {
        if class == 0 {
            self.a1
        } else {
            self.a2
        }
    }
}

/// Lexicographically ordered states `(j, i)` with `j A_1 + i A_2 ≤ C`.
pub fn build_state_space(capacity: u32, a1: u32, a2: u32) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for j in 0..=capacity / a1 {
        for i in 0..=capacity / a2 {
            if j * a1 + i * a2 <= capacity {
                out.push((j, i));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JumpKind {
    Entry,
    Departure,
    /// Switch attempt rejected by a full target; the job is lost.
    Blocked,
    /// Successful switch to a server in state `target`, which moves to
    /// `landing`.
    Switch { target: usize, landing: usize },
}

/// Flat transition descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JumpDesc {
    pub class: usize,
    pub src: usize,
    pub dst: usize,
    pub kind: JumpKind,
}

/// Index tables over the ordered state list.
#[derive(Debug)]
pub struct LossNetLayout {
    pub states: Vec<(u32, u32)>,
    /// State reached by adding a job of each class.
    pub up: [Vec<usize>; 2],
    /// State reached by removing a job of each class.
    pub down: [Vec<usize>; 2],
    /// Servers without room for a job of each class.
    pub blocked: [Vec<bool>; 2],
    /// Number of jobs of each class.
    pub jobs: [Vec<f64>; 2],
    pub jumps: Vec<JumpDesc>,
    pub entry_id: [Vec<usize>; 2],
    pub departure_id: [Vec<usize>; 2],
    pub blocked_id: [Vec<usize>; 2],
    /// `switch_id[c][src * d + target]`.
    pub switch_id: [Vec<usize>; 2],
    /// Flat id ranges `[start, end)` of the six types.
    pub type_ranges: [(usize, usize); 6],
}

impl LossNetLayout {
    fn new(p: &LossNetParams) -> Self {
        let states = build_state_space(p.capacity, p.a1, p.a2);
        let d = states.len();
        let find = |j: i64, i: i64| -> usize {
            if j < 0 || i < 0 {
                return NONE;
            }
            states
                .iter()
                .position(|&s| s == (j as u32, i as u32))
                .unwrap_or(NONE)
        };
        let mut up = [vec![NONE; d], vec![NONE; d]];
        let mut down = [vec![NONE; d], vec![NONE; d]];
        let mut blocked = [vec![false; d], vec![false; d]];
        let mut jobs = [vec![0.0; d], vec![0.0; d]];
        for (s, &(j, i)) in states.iter().enumerate() {
            let (j, i) = (j as i64, i as i64);
            up[0][s] = find(j + 1, i);
            up[1][s] = find(j, i + 1);
            down[0][s] = find(j - 1, i);
            down[1][s] = find(j, i - 1);
            let load = j as u32 * p.a1 + i as u32 * p.a2;
            for c in 0..2 {
                blocked[c][s] = load + p.need(c) > p.capacity;
            }
            jobs[0][s] = j as f64;
            jobs[1][s] = i as f64;
        }

        let mut jumps = Vec::new();
        let mut ranges = [(0, 0); 6];
        let mut entry_id = [vec![NONE; d], vec![NONE; d]];
        let mut departure_id = [vec![NONE; d], vec![NONE; d]];
        let mut blocked_id = [vec![NONE; d], vec![NONE; d]];
        let mut switch_id = [vec![NONE; d * d], vec![NONE; d * d]];
        for c in 0..2 {
            let start = jumps.len();
            for s in 0..d {
                if up[c][s] != NONE {
                    entry_id[c][s] = jumps.len();
                    jumps.push(JumpDesc {
                        class: c,
                        src: s,
                        dst: up[c][s],
                        kind: JumpKind::Entry,
                    });
                }
            }
            ranges[c] = (start, jumps.len());
        }
        for c in 0..2 {
            let start = jumps.len();
            for s in 0..d {
                if down[c][s] != NONE {
                    departure_id[c][s] = jumps.len();
                    jumps.push(JumpDesc {
                        class: c,
                        src: s,
                        dst: down[c][s],
                        kind: JumpKind::Departure,
                    });
                }
            }
            ranges[2 + c] = (start, jumps.len());
        }
        for c in 0..2 {
            let start = jumps.len();
            for s in 0..d {
                if down[c][s] != NONE {
                    blocked_id[c][s] = jumps.len();
                    jumps.push(JumpDesc {
                        class: c,
                        src: s,
                        dst: down[c][s],
                        kind: JumpKind::Blocked,
                    });
                }
            }
            for s in 0..d {
                if down[c][s] == NONE {
                    continue;
                }
                for t in 0..d {
                    // A move onto a server one job short of the source leaves
                    // the empirical measure unchanged.
                    if up[c][t] == NONE || t == down[c][s] {
                        continue;
                    }
                    switch_id[c][s * d + t] = jumps.len();
                    jumps.push(JumpDesc {
                        class: c,
                        src: s,
                        dst: down[c][s],
                        kind: JumpKind::Switch {
                            target: t,
                            landing: up[c][t],
                        },
                    });
                }
            }
            ranges[4 + c] = (start, jumps.len());
        }
        Self {
            states,
            up,
            down,
            blocked,
            jobs,
            jumps,
            entry_id,
            departure_id,
            blocked_id,
            switch_id,
            type_ranges: ranges,
        }
    }

    pub fn d(&self) -> usize {
        self.states.len()
    }

    /// Proportion of servers without room for a class-`c` job.
    #[inline]
    pub fn blocked_mass(&self, c: usize, r: &[f64]) -> f64 {
        r.iter()
            .zip(&self.blocked[c])
            .filter(|(_, &b)| b)
            .map(|(x, _)| x)
            .sum()
    }

    fn jump_vector(&self, j: &JumpDesc) -> JumpVector {
        let d = self.d();
        let mut from = vec![0; d];
        let mut to = vec![0; d];
        from[j.src] += 1;
        to[j.dst] += 1;
        if let JumpKind::Switch { target, landing } = j.kind {
            from[target] += 1;
            to[landing] += 1;
        }
        JumpVector::new(from, to)
    }
}

/// The loss network as a [`ModelSpec`] plus the tables its fast kernel uses.
pub struct LossNetwork {
    params: LossNetParams,
    layout: Arc<LossNetLayout>,
    spec: ModelSpec,
}

impl LossNetwork {
    pub fn new(params: &LossNetParams) -> Result<Self> {
        params.validate()?;
        let layout = Arc::new(LossNetLayout::new(params));
        let spec = build_spec(params, &layout)?;
        Ok(Self {
            params: params.clone(),
            layout,
            spec,
        })
    }

    pub fn params(&self) -> &LossNetParams {
        &self.params
    }

    pub fn layout(&self) -> &LossNetLayout {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn into_spec(self) -> ModelSpec {
        self.spec
    }

    /// Composition-sampling kernel for the `N`-server system.
    pub fn kernel(&self, n: usize, controlled: bool) -> LossNetKernel<'_> {
        let sqrt_n = (n as f64).sqrt();
        let lam = self.params.lambda;
        let d_box = self.params.d_box;
        let entry_bound = if controlled {
            [(lam[0] + d_box / sqrt_n).max(0.0), (lam[1] + d_box / sqrt_n).max(0.0)]
        } else {
            lam
        };
        LossNetKernel {
            net: self,
            n,
            controlled,
            entry_bound,
        }
    }
}

/// Builds the loss network's [`ModelSpec`].
pub fn build_lossnet_model(params: &LossNetParams) -> Result<ModelSpec> {
    Ok(LossNetwork::new(params)?.into_spec())
}

fn build_spec(p: &LossNetParams, layout: &Arc<LossNetLayout>) -> Result<ModelSpec> {
    let d = layout.d();
    let names = ["E1", "E2", "L1", "L2", "C1", "C2"];
    let types = names
        .iter()
        .zip(&layout.type_ranges)
        .enumerate()
        .map(|(k, (name, &(a, b)))| TransitionType {
            name: (*name).into(),
            max_participants: if k >= 4 { 2 } else { 1 },
            jumps: layout.jumps[a..b].iter().map(|j| layout.jump_vector(j)).collect(),
        })
        .collect();

    let (lam, tau, gam) = (p.lambda, p.tau, p.gamma);
    let base_layout = Arc::clone(layout);
    let base_rate = Arc::new(move |r: &[f64], id: usize| {
        let l = &base_layout;
        let j = l.jumps[id];
        let c = j.class;
        let rs = r[j.src];
        match j.kind {
            JumpKind::Entry => lam[c] * rs,
            JumpKind::Departure => l.jobs[c][j.src] * tau[c] * rs,
            JumpKind::Blocked => l.jobs[c][j.src] * gam[c] * rs * l.blocked_mass(c, r),
            JumpKind::Switch { target, .. } => l.jobs[c][j.src] * gam[c] * rs * r[target],
        }
    });

    let pre_layout = Arc::clone(layout);
    let prelimit_rate = Arc::new(move |n: usize, r: &[f64], u: f64, id: usize| {
        let l = &pre_layout;
        let j = l.jumps[id];
        let c = j.class;
        let nf = n as f64;
        let ns = nf * r[j.src];
        match j.kind {
            JumpKind::Entry => ns * (lam[c] + u),
            JumpKind::Departure => l.jobs[c][j.src] * ns * tau[c],
            // Targets are the other N - 1 servers.
            JumpKind::Blocked if n > 1 => {
                let own = if l.blocked[c][j.src] { 1.0 } else { 0.0 };
                l.jobs[c][j.src] * ns * gam[c] * (nf * l.blocked_mass(c, r) - own) / (nf - 1.0)
            }
            JumpKind::Switch { target, .. } if n > 1 => {
                let own = if target == j.src { 1.0 } else { 0.0 };
                l.jobs[c][j.src] * ns * gam[c] * (nf * r[target] - own) / (nf - 1.0)
            }
            _ => 0.0,
        }
    });

    let h1_layout = Arc::clone(layout);
    let h1 = Arc::new(move |r: &[f64], id: usize| {
        let j = h1_layout.jumps[id];
        if j.kind == JumpKind::Entry {
            r[j.src]
        } else {
            0.0
        }
    });

    let h2_layout = Arc::clone(layout);
    let h2 = Arc::new(move |r: &[f64], id: usize, out: &mut [f64]| {
        let l = &h2_layout;
        let j = l.jumps[id];
        let c = j.class;
        let jobs = l.jobs[c][j.src];
        match j.kind {
            JumpKind::Entry => out[j.src] += lam[c],
            JumpKind::Departure => out[j.src] += jobs * tau[c],
            JumpKind::Switch { target, .. } => {
                out[target] += jobs * gam[c] * r[j.src];
                out[j.src] += jobs * gam[c] * r[target];
            }
            JumpKind::Blocked => {
                for (t, &b) in l.blocked[c].iter().enumerate() {
                    if b {
                        out[t] += jobs * gam[c] * r[j.src];
                    }
                }
                out[j.src] += jobs * gam[c] * l.blocked_mass(c, r);
            }
        }
    });

    let control_coord = layout
        .jumps
        .iter()
        .map(|j| (j.kind == JumpKind::Entry).then_some(j.class))
        .collect();
    let nondegenerate = layout
        .jumps
        .iter()
        .enumerate()
        .filter(|(_, j)| matches!(j.kind, JumpKind::Entry | JumpKind::Departure))
        .map(|(id, _)| id)
        .collect();

    ModelSpec::new(ModelParts {
        name: "lossnet".into(),
        d,
        state_labels: layout.states.iter().map(|(j, i)| format!("({j},{i})")).collect(),
        types,
        base_rate,
        prelimit_rate,
        h1,
        h2,
        control_coord,
        control_box: ControlBox::symmetric(2, p.d_box),
        nondegenerate,
    })
}

/// Event kernel sampling the loss network by composition.
///
/// Entries and departures are drawn per source state. A switch attempt picks
/// its source in proportion to `jobs · n_s · γ` times the fraction of other
/// servers that are not one job short of the source, then a target server
/// uniformly among those; a full target makes it an unsuccessful switch.
/// The implied rate of every `(k, ν)` equals the model's prelimit rate.
pub struct LossNetKernel<'a> {
    net: &'a LossNetwork,
    n: usize,
    controlled: bool,
    entry_bound: [f64; 2],
}

pub struct LossNetScratch {
    /// Per-source weights of `E1, E2, L1, L2, C1, C2`.
    weights: [Vec<f64>; 6],
    totals: [f64; 6],
    total: f64,
}

impl LossNetKernel<'_> {
    fn switch_scale(&self, counts: &[i64], c: usize, s: usize) -> f64 {
        let nf = self.n as f64;
        let short = self.net.layout.down[c][s];
        (nf - 1.0 - counts[short] as f64) / (nf - 1.0)
    }

    /// Rate of transition `id` implied by the sampling scheme, for reduced
    /// control `u` (ignored by uncontrolled kernels).
    pub fn implied_rate(&self, counts: &[i64], id: usize, u_reduced: &[f64]) -> f64 {
        let l = &self.net.layout;
        let p = &self.net.params;
        let j = l.jumps[id];
        let c = j.class;
        let nf = self.n as f64;
        let ns = counts[j.src] as f64;
        let jobs = l.jobs[c][j.src];
        match j.kind {
            JumpKind::Entry => {
                let u = if self.controlled { u_reduced[c] } else { 0.0 };
                (ns * (p.lambda[c] + u / nf.sqrt())).max(0.0)
            }
            JumpKind::Departure => jobs * ns * p.tau[c],
            _ if self.n < 2 => 0.0,
            JumpKind::Blocked | JumpKind::Switch { .. } => {
                let attempt = jobs * ns * p.gamma[c] * self.switch_scale(counts, c, j.src);
                let short = l.down[c][j.src];
                let eligible = nf - 1.0 - counts[short] as f64;
                if eligible <= 0.0 {
                    return 0.0;
                }
                let hits = match j.kind {
                    JumpKind::Switch { target, .. } => {
                        counts[target] as f64 - if target == j.src { 1.0 } else { 0.0 }
                    }
                    _ => (0..l.d())
                        .filter(|&t| l.blocked[c][t])
                        .map(|t| counts[t] as f64 - if t == j.src { 1.0 } else { 0.0 })
                        .sum(),
                };
                attempt * hits / eligible
            }
        }
    }
}

impl EventKernel for LossNetKernel<'_> {
    type Scratch = LossNetScratch;

    fn dim(&self) -> usize {
        self.net.layout.d()
    }

    fn population(&self) -> usize {
        self.n
    }

    fn controlled(&self) -> bool {
        self.controlled
    }

    fn new_scratch(&self) -> LossNetScratch {
        let d = self.dim();
        LossNetScratch {
            weights: std::array::from_fn(|_| vec![0.0; d]),
            totals: [0.0; 6],
            total: 0.0,
        }
    }

    fn refresh(&self, s: &mut LossNetScratch, counts: &[i64]) -> f64 {
        let l = &self.net.layout;
        let p = &self.net.params;
        let d = l.d();
        let nf = self.n as f64;
        let mut totals = [0.0; 6];
        for c in 0..2 {
            let (we, rest) = s.weights.split_at_mut(2);
            let we = &mut we[c];
            let (wl, wc) = rest.split_at_mut(2);
            let wl = &mut wl[c];
            let wc = &mut wc[c];
            let jobs = &l.jobs[c];
            for st in 0..d {
                let ns = counts[st] as f64;
                let e = if l.up[c][st] != NONE { ns * self.entry_bound[c] } else { 0.0 };
                let dep = jobs[st] * ns * p.tau[c];
                let sw = if self.n > 1 && jobs[st] > 0.0 && ns > 0.0 {
                    let short = counts[l.down[c][st]] as f64;
                    jobs[st] * ns * p.gamma[c] * (nf - 1.0 - short) / (nf - 1.0)
                } else {
                    0.0
                };
                we[st] = e;
                wl[st] = dep;
                wc[st] = sw;
                totals[c] += e;
                totals[2 + c] += dep;
                totals[4 + c] += sw;
            }
        }
        s.totals = totals;
        s.total = totals.iter().sum();
        s.total
    }

    fn propose<R: Rng + ?Sized>(&self, s: &LossNetScratch, counts: &[i64], rng: &mut R) -> Candidate {
        let l = &self.net.layout;
        let p = &self.net.params;
        let d = l.d();
        let mut x = rng.random::<f64>() * s.total;
        let mut cat = 5;
        for (k, &tot) in s.totals.iter().enumerate() {
            if x < tot {
                cat = k;
                break;
            }
            x -= tot;
        }
        while s.totals[cat] <= 0.0 {
            cat -= 1;
        }
        let w = &s.weights[cat];
        let mut src = NONE;
        let mut last = NONE;
        for (st, &wt) in w.iter().enumerate() {
            if wt > 0.0 {
                last = st;
                if x < wt {
                    src = st;
                    break;
                }
                x -= wt;
            }
        }
        if src == NONE {
            src = last;
        }
        let c = cat % 2;
        match cat / 2 {
            0 => Candidate {
                id: l.entry_id[c][src],
                bound: w[src],
            },
            1 => Candidate {
                id: l.departure_id[c][src],
                bound: w[src],
            },
            _ => {
                let short = l.down[c][src];
                let eligible = self.n as i64 - 1 - counts[short];
                let mut k = rng.random_range(0..eligible);
                let mut target = NONE;
                for t in 0..d {
                    if t == short {
                        continue;
                    }
                    let avail = counts[t] - i64::from(t == src);
                    if k < avail {
                        target = t;
                        break;
                    }
                    k -= avail;
                }
                let id = if l.blocked[c][target] {
                    l.blocked_id[c][src]
                } else {
                    l.switch_id[c][src * d + target]
                };
                let nf = self.n as f64;
                let avail = counts[target] as f64 - if target == src { 1.0 } else { 0.0 };
                Candidate {
                    id,
                    bound: l.jobs[c][src] * counts[src] as f64 * p.gamma[c] * avail / (nf - 1.0),
                }
            }
        }
    }

    fn controlled_rate(&self, counts: &[i64], id: usize, u_reduced: &[f64]) -> Option<f64> {
        if !self.controlled {
            return None;
        }
        let j = self.net.layout.jumps[id];
        if j.kind != JumpKind::Entry {
            return None;
        }
        let c = j.class;
        let raw = counts[j.src] as f64
            * (self.net.params.lambda[c] + u_reduced[c] / (self.n as f64).sqrt());
        if raw < 0.0 {
            self.net.spec.note_negative_rate();
            Some(0.0)
        } else {
            Some(raw)
        }
    }

    fn shift(&self, id: usize) -> &[(usize, i32)] {
        &self.net.spec.transitions()[id].sparse
    }
}

/// Configuration of the loss-network cost-comparison experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Config {
    pub params: LossNetParams,
    pub n: usize,
    pub horizon: f64,
    pub n_trials: usize,
    pub alphas: Vec<f64>,
}

/// `N = 10⁴`, `T = 10`, `C = 6`, `A = (1, 1)`, all rates 1, 128 trials per
/// arm, control-cost weights 0.01 and 0.001, `D = 5`. Start: the fluid fixed
/// point.
pub fn table1_config() -> Table1Config {
    Table1Config {
        params: LossNetParams::default(),
        n: 10_000,
        horizon: 10.0,
        n_trials: 128,
        alphas: vec![0.01, 0.001],
    }
}

/// Published averages for [`table1_config`]: `(deviation, control energy
/// ∫‖√N U‖², total)` for the uncontrolled arm and each `α`.
pub const REFERENCE_TABLE1: [(f64, f64, f64); 3] = [
    (8.9556, 0.0, 8.9556),
    (8.1271, 25.37, 8.3809),
    (7.5649, 256.8, 7.8217),
];
