//! Clamped B-spline basis on [0, 1] and its derivative-penalty matrix.

use nalgebra::DMatrix;

use crate::error::{GofError, Result};
use crate::funcdata::Grid;

/// Gauss-Legendre nodes and weights on [-1, 1], 5 points.
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

impl BSplineBasis {
    /// `n_basis` functions of the given degree with interior knots at quantiles
    /// of the grid points, boundary knots repeated `degree + 1` times.
    pub fn from_grid(grid: &Grid, n_basis: usize, degree: usize) -> Result<Self> {
        if n_basis < degree + 1 {
            return Err(GofError::InvalidArgument(format!(
                "need at least {} basis functions for degree {degree}, got {n_basis}",
                degree + 1
            )));
        }
        let pts = grid.points();
        let (lo, hi) = (pts[0], pts[pts.len() - 1]);
        let n_interior = n_basis - degree - 1;
        let mut knots = vec![lo; degree + 1];
        for k in 1..=n_interior {
            let q = k as f64 / (n_interior + 1) as f64;
            knots.push(quantile(pts, q));
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(GofError::InvalidArgument("knots must be nondecreasing".into()));
        }
        Ok(Self { knots, degree })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lower(&self) -> f64 {
        self.knots[0]
    }

    fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// All basis functions of degree `d` (same knots) at `x`; length `L - d - 1`.
    fn values_of_degree(&self, d: usize, x: f64) -> Vec<f64> {
        let t = &self.knots;
        let l = t.len();
        let x = x.clamp(self.lower(), self.upper());
        let mut b = vec![0.0; l - 1];
        // Span containing x; the right endpoint belongs to the last nonempty span.
        let span = if x >= self.upper() {
            (0..l - 1).rev().find(|&i| t[i] < t[i + 1]).unwrap_or(0)
        } else {
            (0..l - 1).find(|&i| t[i] <= x && x < t[i + 1]).unwrap_or(0)
        };
        b[span] = 1.0;
        for k in 1..=d {
            let count = l - k - 1;
            let mut next = vec![0.0; count];
            for (i, slot) in next.iter_mut().enumerate() {
                let mut v = 0.0;
                let den1 = t[i + k] - t[i];
                if den1 > 0.0 {
                    v += (x - t[i]) / den1 * b[i];
                }
                let den2 = t[i + k + 1] - t[i + 1];
                if den2 > 0.0 {
                    v += (t[i + k + 1] - x) / den2 * b[i + 1];
                }
                *slot = v;
            }
            b = next;
        }
        b
    }

    fn derivative_of_degree(&self, d: usize, order: usize, x: f64) -> Vec<f64> {
        if order == 0 {
            return self.values_of_degree(d, x);
        }
        if order > d {
            return vec![0.0; self.knots.len() - d - 1];
        }
        let lower = self.derivative_of_degree(d - 1, order - 1, x);
        let t = &self.knots;
        let count = t.len() - d - 1;
        (0..count)
            .map(|i| {
                let mut v = 0.0;
                let den1 = t[i + d] - t[i];
                if den1 > 0.0 {
                    v += lower[i] / den1;
                }
                let den2 = t[i + d + 1] - t[i + 1];
                if den2 > 0.0 {
                    v -= lower[i + 1] / den2;
                }
                d as f64 * v
            })
            .collect()
    }

    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        self.values_of_degree(self.degree, x)
    }

    /// `order`-th derivative of every basis function at `x`.
    pub fn derivative(&self, x: f64, order: usize) -> Vec<f64> {
        self.derivative_of_degree(self.degree, order, x)
    }

    /// `T × K` matrix of basis values at the grid points.
    pub fn design(&self, grid: &Grid) -> DMatrix<f64> {
        let k = self.len();
        let mut m = DMatrix::zeros(grid.len(), k);
        for (r, &x) in grid.points().iter().enumerate() {
            for (c, v) in self.evaluate(x).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// `P[a][b] = ∫ B_a^{(m)} B_b^{(m)}`, exact for cubic splines via 5-point
    /// Gauss-Legendre on each knot span.
    pub fn penalty_matrix(&self, order: usize) -> Result<DMatrix<f64>> {
        if order == 0 || order > self.degree {
            return Err(GofError::InvalidArgument(format!(
                "penalty order must be in 1..={}, got {order}",
                self.degree
            )));
        }
        let k = self.len();
        let mut p = DMatrix::zeros(k, k);
        for w in self.knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
                // Nudge inside the span so the derivative uses its polynomial piece.
                let x = (mid + half * node).clamp(a + 1e-14, b - 1e-14);
                let d = self.derivative(x, order);
                for r in 0..k {
                    if d[r] == 0.0 {
                        continue;
                    }
                    for c in 0..k {
                        p[(r, c)] += weight * half * d[r] * d[c];
                    }
                }
            }
        }
        Ok((&p + p.transpose()) * 0.5)
    }

    /// Greville abscissae: coefficients that reproduce `f(x) = x`.
    pub fn greville(&self) -> Vec<f64> {
        let d = self.degree;
        (0..self.len())
            .map(|i| {
                if d == 0 {
                    self.knots[i]
                } else {
                    self.knots[i + 1..=i + d].iter().sum::<f64>() / d as f64
                }
            })
            .collect()
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}
