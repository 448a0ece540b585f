//! Piecewise cubic Hermite interpolation of matrix-valued grid functions.
//!
//! Node slopes are Catmull-Rom (central differences, one-sided at the two
//! ends) and are formed on the fly from neighbouring nodes, so a series
//! stores its node values only.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Hermite basis `(h00, h10, h01, h11)` at `s ∈ [0, 1]`.
#[inline]
pub fn hermite_basis(s: f64) -> [f64; 4] {
    let s2 = s * s;
    let s3 = s2 * s;
    [
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    ]
}

/// Index `k` with `t_grid[k] ≤ t ≤ t_grid[k + 1]`, clamped to the grid.
#[inline]
pub fn locate(t_grid: &[f64], t: f64) -> usize {
    let n = t_grid.len();
    if n < 2 {
        return 0;
    }
    let k = t_grid.partition_point(|&x| x <= t);
    k.saturating_sub(1).min(n - 2)
}

/// Matrices sampled on a strictly increasing time grid.
#[derive(Clone, Debug)]
pub struct MatrixSeries {
    t_grid: Vec<f64>,
    nodes: Vec<DMatrix<f64>>,
}

impl MatrixSeries {
    pub fn new(t_grid: Vec<f64>, nodes: Vec<DMatrix<f64>>) -> Result<Self> {
        if t_grid.is_empty() || t_grid.len() != nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} grid times for {} matrices",
                t_grid.len(),
                nodes.len()
            )));
        }
        if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
        }
        let shape = nodes[0].shape();
        if nodes.iter().any(|m| m.shape() != shape) {
            return Err(Error::InvalidArgument("matrices of mixed shapes".into()));
        }
        Ok(Self { t_grid, nodes })
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn nodes(&self) -> &[DMatrix<f64>] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> &DMatrix<f64> {
        &self.nodes[k]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.nodes[0].shape()
    }

    /// Interpolated value at `t`, written into `out` (shape must match).
    /// Outside the grid the end segments are extrapolated.
    pub fn eval_into(&self, t: f64, out: &mut DMatrix<f64>) {
        let n = self.nodes.len();
        if n == 1 {
            out.copy_from(&self.nodes[0]);
            return;
        }
        let g = &self.t_grid;
        let k = locate(g, t);
        let dt = g[k + 1] - g[k];
        let s = (t - g[k]) / dt;
        if s == 0.0 {
            out.copy_from(&self.nodes[k]);
            return;
        }
        if s == 1.0 {
            out.copy_from(&self.nodes[k + 1]);
            return;
        }
        let [h00, h10, h01, h11] = hermite_basis(s);
        // Slope at node j, times dt, as a combination of node values.
        let slope_terms = |j: usize| -> [(usize, f64); 2] {
            let (lo, hi) = if j == 0 {
                (0, 1)
            } else if j == n - 1 {
                (n - 2, n - 1)
            } else {
                (j - 1, j + 1)
            };
            let w = dt / (g[hi] - g[lo]);
            [(hi, w), (lo, -w)]
        };
        let mut coef: [(usize, f64); 6] = [(k, h00), (k + 1, h01), (0, 0.0), (0, 0.0), (0, 0.0), (0, 0.0)];
        let [a, b] = slope_terms(k);
        coef[2] = (a.0, h10 * a.1);
        coef[3] = (b.0, h10 * b.1);
        let [a, b] = slope_terms(k + 1);
        coef[4] = (a.0, h11 * a.1);
        coef[5] = (b.0, h11 * b.1);
        let dst = out.as_mut_slice();
        dst.iter_mut().for_each(|x| *x = 0.0);
        for &(j, c) in &coef {
            if c == 0.0 {
                continue;
            }
            for (o, v) in dst.iter_mut().zip(self.nodes[j].as_slice()) {
                *o += c * v;
            }
        }
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let (r, c) = self.shape();
        let mut out = DMatrix::zeros(r, c);
        self.eval_into(t, &mut out);
        out
    }
}
