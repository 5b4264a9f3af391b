//! Functional-data containers on a shared grid over [0, 1], trapezoidal
//! quadrature, and the two simulation designs used by the experiment harness.
//!
//! Curves are stored row-wise: `values[(i, t)]` is curve `i` at grid point `t`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{GofError, Result};

/// Number of Karhunen-Loève terms used by both simulation designs.
pub const KL_TERMS: usize = 100;
/// Grid resolution used by both simulation designs.
pub const SIM_GRID_POINTS: usize = 1000;

/// Ordered evaluation points in [0, 1] with positive quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    /// Builds a grid with trapezoidal weights.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(GofError::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(GofError::InvalidGrid("non-finite grid point".into()));
        }
        if points[0] < 0.0 || points[points.len() - 1] > 1.0 {
            return Err(GofError::InvalidGrid(format!(
                "points must lie in [0, 1], got [{}, {}]",
                points[0],
                points[points.len() - 1]
            )));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GofError::InvalidGrid("points must be strictly increasing".into()));
        }
        let t = points.len();
        let mut weights = vec![0.0; t];
        for k in 0..t - 1 {
            let h = points[k + 1] - points[k];
            weights[k] += 0.5 * h;
            weights[k + 1] += 0.5 * h;
        }
        Ok(Self { points, weights })
    }

    /// `len` evenly spaced points covering [0, 1] including both endpoints.
    pub fn uniform(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(GofError::InvalidGrid(format!("need at least 2 points, got {len}")));
        }
        let step = 1.0 / (len - 1) as f64;
        let mut points: Vec<f64> = (0..len).map(|k| k as f64 * step).collect();
        points[len - 1] = 1.0;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Quadrature approximation of the L² inner product of two curves on this grid.
    pub fn inner_product(&self, f: &[f64], g: &[f64]) -> Result<f64> {
        if f.len() != self.len() || g.len() != self.len() {
            return Err(GofError::Dimension(format!(
                "curves of length {} and {} on a grid of length {}",
                f.len(),
                g.len(),
                self.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum())
    }

    /// Evaluates `f` at every grid point.
    pub fn evaluate(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.points.iter().map(|&t| f(t)).collect()
    }
}

/// A curve sampled on a grid, used where the grid identity matters.
#[derive(Debug, Clone, Copy)]
pub struct Curve<'a> {
    pub grid: &'a Grid,
    pub values: &'a [f64],
}

/// L² inner product of two curves; the curves must share one grid.
pub fn inner_product(f: Curve<'_>, g: Curve<'_>) -> Result<f64> {
    if f.grid != g.grid {
        return Err(GofError::Dimension("curves live on different grids".into()));
    }
    f.grid.inner_product(f.values, g.values)
}

/// `n` curves observed on one grid.
#[derive(Debug, Clone)]
pub struct FunctionalSample {
    grid: Grid,
    values: DMatrix<f64>,
}

impl FunctionalSample {
    pub fn new(grid: Grid, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() != grid.len() {
            return Err(GofError::Dimension(format!(
                "{} columns for a grid of {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GofError::InvalidArgument("curve values must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn curve(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// `⟨X_i, f⟩` for every curve.
    pub fn project(&self, f: &[f64]) -> Result<DVector<f64>> {
        if f.len() != self.grid.len() {
            return Err(GofError::Dimension(format!(
                "function of length {} on a grid of {} points",
                f.len(),
                self.grid.len()
            )));
        }
        let wf = DVector::from_iterator(
            f.len(),
            f.iter().zip(self.grid.weights()).map(|(a, w)| a * w),
        );
        Ok(&self.values * wf)
    }

    /// Curves as CSV: first row holds the grid points, one curve per subsequent row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(self.grid.points().iter().map(|v| format_f64(*v)))?;
        for row in self.values.row_iter() {
            w.write_record(row.iter().map(|v| format_f64(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for record in r.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| {
                        GofError::InvalidArgument(format!("bad number {s:?} in curve CSV: {e}"))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.len() < 2 {
            return Err(GofError::InvalidArgument(
                "curve CSV needs a grid row and at least one curve".into(),
            ));
        }
        let grid = Grid::new(rows.remove(0))?;
        let t = grid.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != t) {
            return Err(GofError::Dimension(format!(
                "curve {} has {} values, grid has {}",
                bad,
                rows[bad].len(),
                t
            )));
        }
        let n = rows.len();
        let values = DMatrix::from_row_iterator(n, t, rows.into_iter().flatten());
        Self::new(grid, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseFamily {
    Gaussian,
    Bernoulli,
    Poisson,
}

/// Scalar responses tagged with their distribution family.
#[derive(Debug, Clone)]
pub struct ScalarResponse {
    values: DVector<f64>,
    family: ResponseFamily,
}

impl ScalarResponse {
    pub fn new(values: Vec<f64>, family: ResponseFamily) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(GofError::InvalidResponse(format!("non-finite response {v}")));
        }
        match family {
            ResponseFamily::Gaussian => {}
            ResponseFamily::Bernoulli => {
                if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(GofError::InvalidResponse(format!(
                        "bernoulli responses must be 0 or 1, got {v}"
                    )));
                }
            }
            ResponseFamily::Poisson => {
                if let Some(v) = values.iter().find(|&&v| v < 0.0 || v.fract() != 0.0) {
                    return Err(GofError::InvalidResponse(format!(
                        "poisson responses must be nonnegative integers, got {v}"
                    )));
                }
            }
        }
        Ok(Self { values: DVector::from_vec(values), family })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn family(&self) -> ResponseFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One-column CSV, one response per line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for v in self.values.iter() {
            w.write_record([format_f64(*v)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, family: ResponseFamily) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut values = Vec::new();
        for record in r.records() {
            let record = record?;
            if record.len() != 1 {
                return Err(GofError::InvalidArgument(format!(
                    "response CSV must have one column, found {}",
                    record.len()
                )));
            }
            let s = record[0].trim();
            values.push(s.parse::<f64>().map_err(|e| {
                GofError::InvalidArgument(format!("bad number {s:?} in response CSV: {e}"))
            })?);
        }
        Self::new(values, family)
    }
}

/// Responses and curves in one CSV: header `y,<grid points...>`, then one
/// observation per row with the response first.
pub fn write_dataset_csv<W: Write>(sample: &FunctionalSample, response: &ScalarResponse, writer: W) -> Result<()> {
    if sample.n() != response.len() {
        return Err(GofError::Dimension(format!(
            "{} curves but {} responses",
            sample.n(),
            response.len()
        )));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut header = vec!["y".to_string()];
    header.extend(sample.grid().points().iter().map(|v| format_f64(*v)));
    w.write_record(&header)?;
    for (i, row) in sample.values().row_iter().enumerate() {
        let mut rec = vec![format_f64(response.values()[i])];
        rec.extend(row.iter().map(|v| format_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_dataset_csv`].
pub fn read_dataset_csv<R: Read>(reader: R, family: ResponseFamily) -> Result<(FunctionalSample, ScalarResponse)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| GofError::InvalidArgument("empty data CSV".into()))??;
    if header.get(0).map(str::trim) != Some("y") {
        return Err(GofError::InvalidArgument("data CSV header must start with \"y\"".into()));
    }
    let parse = |s: &str, line: usize| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| GofError::InvalidArgument(format!("bad number {s:?} on line {line} of data CSV: {e}")))
    };
    let grid = Grid::new(header.iter().skip(1).map(|s| parse(s, 1)).collect::<Result<Vec<_>>>()?)?;
    let t = grid.len();
    let mut y = Vec::new();
    let mut values = Vec::new();
    for (k, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != t + 1 {
            return Err(GofError::Dimension(format!(
                "line {} has {} fields, expected {}",
                k + 2,
                rec.len(),
                t + 1
            )));
        }
        y.push(parse(&rec[0], k + 2)?);
        for s in rec.iter().skip(1) {
            values.push(parse(s, k + 2)?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(GofError::InvalidArgument("data CSV has no observations".into()));
    }
    let sample = FunctionalSample::new(grid, DMatrix::from_row_slice(n, t, &values))?;
    Ok((sample, ScalarResponse::new(y, family)?))
}

fn format_f64(v: f64) -> String {
    // `{:?}` prints the shortest representation that round-trips.
    format!("{v:?}")
}

/// Output of a simulation design.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub sample: FunctionalSample,
    pub response: ScalarResponse,
    /// True slope function on the sample grid.
    pub beta: Vec<f64>,
}

fn check_sim_args(n: usize, a: f64) -> Result<()> {
    if n < 3 {
        return Err(GofError::InvalidSize { min: 3, got: n });
    }
    if !(a >= 0.0) || !a.is_finite() {
        return Err(GofError::InvalidArgument(format!("deviation a must be >= 0, got {a}")));
    }
    Ok(())
}

/// `KL_TERMS × T` matrix of basis functions evaluated on the grid.
fn basis_matrix(grid: &Grid, f: impl Fn(usize, f64) -> f64) -> DMatrix<f64> {
    let t = grid.len();
    DMatrix::from_fn(KL_TERMS, t, |j, k| f(j + 1, grid.points()[k]))
}

/// Cosine basis of the first design: `φ_1 = 1`, `φ_j = √2 cos((j-1)πt)`.
pub fn cosine_basis(j: usize, t: f64) -> f64 {
    if j == 1 {
        1.0
    } else {
        2f64.sqrt() * ((j - 1) as f64 * PI * t).cos()
    }
}

/// Sine basis of the second design: `V_j = √2 sin((j-0.5)πt)`.
pub fn sine_basis(j: usize, t: f64) -> f64 {
    2f64.sqrt() * ((j as f64 - 0.5) * PI * t).sin()
}

/// Slope coefficients of the first design: one of the first two cosine
/// directions, chosen by a fair coin, scaled so that `‖β‖² = 1.5`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example1Theta {
    pub theta: [f64; 2],
}

impl Example1Theta {
    pub const R_SQUARED: f64 = 1.5;

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let unif = Uniform::new(0.0, 1.0).expect("valid range");
        let b: [f64; 2] = [unif.sample(rng), unif.sample(rng)];
        let first: bool = rng.random_bool(0.5);
        let ind = if first { [1.0, 0.0] } else { [0.0, 1.0] };
        let bar = [b[0] * ind[0], b[1] * ind[1]];
        let norm = (bar[0] * bar[0] + bar[1] * bar[1]).sqrt();
        if norm == 0.0 {
            // b_j = 0 has probability zero; fall back to the selected direction.
            return Self { theta: ind };
        }
        Self { theta: [bar[0] / norm, bar[1] / norm] }
    }

    pub fn beta(&self, t: f64) -> f64 {
        Self::R_SQUARED.sqrt() * (self.theta[0] * cosine_basis(1, t) + self.theta[1] * cosine_basis(2, t))
    }
}

/// Functional linear model with a quadratic departure of size `a`:
/// `Y = ⟨X, β⟩ + a⟨X, X⟩ + ε`, `X = Σ √κ_j η_j φ_j`, `κ_j = j^{-1.7}`.
pub fn gen_example1<R: Rng + ?Sized>(n: usize, a: f64, rng: &mut R) -> Result<SimulatedData> {
    check_sim_args(n, a)?;
    let theta = Example1Theta::draw(rng);
    gen_example1_with_theta(n, a, theta, rng)
}

pub fn gen_example1_with_theta<R: Rng + ?Sized>(
    n: usize,
    a: f64,
    theta: Example1Theta,
    rng: &mut R,
) -> Result<SimulatedData> {
    check_sim_args(n, a)?;
    let grid = Grid::uniform(SIM_GRID_POINTS)?;
    let phi = basis_matrix(&grid, cosine_basis);
    let scores = DMatrix::from_fn(n, KL_TERMS, |_, j| {
        let z: f64 = StandardNormal.sample(rng);
        ((j + 1) as f64).powf(-1.7).sqrt() * z
    });
    let values = scores * phi;
    let beta = grid.evaluate(|t| theta.beta(t));
    let sample = FunctionalSample::new(grid, values)?;
    let linear = sample.project(&beta)?;
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = sample.values().row(i);
        let sq: f64 = row
            .iter()
            .zip(sample.grid().weights())
            .map(|(x, w)| w * x * x)
            .sum();
        let eps: f64 = StandardNormal.sample(rng);
        y.push(linear[i] + a * sq + eps);
    }
    Ok(SimulatedData {
        sample,
        response: ScalarResponse::new(y, ResponseFamily::Gaussian)?,
        beta,
    })
}

/// Slope function of the second design.
pub fn example2_beta(t: f64) -> f64 {
    3.0e5 * t.powi(11) * (1.0 - t).powi(6)
}

/// Functional logistic model with departure `a`:
/// `P(Y=1|X) = expit(η + a·exp(η))`, `η = ⟨X, β⟩`, scores censored to [-0.5, 0.5].
pub fn gen_example2<R: Rng + ?Sized>(n: usize, a: f64, rng: &mut R) -> Result<SimulatedData> {
    check_sim_args(n, a)?;
    let grid = Grid::uniform(SIM_GRID_POINTS)?;
    let basis = basis_matrix(&grid, sine_basis);
    let scores = DMatrix::from_fn(n, KL_TERMS, |_, j| {
        let xi: f64 = StandardNormal.sample(rng);
        let lambda = 1.0 / (((j + 1) as f64 - 0.5).powi(2) * PI * PI);
        lambda.sqrt() * xi.clamp(-0.5, 0.5)
    });
    let values = scores * basis;
    let beta = grid.evaluate(example2_beta);
    let sample = FunctionalSample::new(grid, values)?;
    let eta = sample.project(&beta)?;
    let y = eta
        .iter()
        .map(|&e| {
            let p = expit(e + a * e.exp());
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(SimulatedData {
        sample,
        response: ScalarResponse::new(y, ResponseFamily::Bernoulli)?,
        beta,
    })
}

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
