//! Penalized maximum likelihood for the generalized functional linear model
//!
//! ```text
//! maximize  n⁻¹ Σ ℓ(Y_i; α + ⟨X_i, β⟩) − (λ/2) ∫ (β^{(m)})²
//! ```
//!
//! with `β` expanded in a cubic B-spline basis. The design row of curve `i`
//! is `(1, ⟨X_i, B_1⟩, …, ⟨X_i, B_K⟩)`, so the problem becomes a penalized GLM
//! solved by damped Newton steps (equivalently IRLS with step-halving).

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GofError, Result};
use crate::funcdata::{expit, FunctionalSample, Grid, ResponseFamily, ScalarResponse};
use crate::spline::BSplineBasis;

/// Exponential family with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianIdentity,
    BernoulliLogit,
    PoissonLog,
}

impl Family {
    pub fn for_response(f: ResponseFamily) -> Self {
        match f {
            ResponseFamily::Gaussian => Family::GaussianIdentity,
            ResponseFamily::Bernoulli => Family::BernoulliLogit,
            ResponseFamily::Poisson => Family::PoissonLog,
        }
    }

    pub fn response_family(self) -> ResponseFamily {
        match self {
            Family::GaussianIdentity => ResponseFamily::Gaussian,
            Family::BernoulliLogit => ResponseFamily::Bernoulli,
            Family::PoissonLog => ResponseFamily::Poisson,
        }
    }

    /// Mean function `F`.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::BernoulliLogit => expit(eta),
            Family::PoissonLog => eta.exp(),
        }
    }

    /// `F′`.
    pub fn mean_derivative(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::BernoulliLogit => {
                let p = expit(eta);
                p * (1.0 - p)
            }
            Family::PoissonLog => eta.exp(),
        }
    }

    /// `ℓ(y; a)` up to terms free of `a`.
    pub fn loglik(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => -0.5 * (y - eta) * (y - eta),
            // y·a − log(1 + eᵃ), stable for large |a|
            Family::BernoulliLogit => y * eta - softplus(eta),
            Family::PoissonLog => y * eta - eta.exp(),
        }
    }

    /// `ℓ̇_a(y; a)`.
    pub fn score(self, y: f64, eta: f64) -> f64 {
        y - self.mean(eta)
    }

    /// `−ℓ̈_a(y; a)`, nonnegative by concavity.
    pub fn neg_hessian(self, eta: f64) -> f64 {
        self.mean_derivative(eta)
    }

    /// Link `F⁻¹`, used for starting values.
    fn link(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => mu,
            Family::BernoulliLogit => {
                let p = mu.clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln()
            }
            Family::PoissonLog => mu.max(1e-6).ln(),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaChoice {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub basis_size: usize,
    pub degree: usize,
    pub penalty_order: usize,
    pub max_iter: usize,
    /// Relative coefficient-change tolerance.
    pub tol: f64,
    pub max_halvings: usize,
    pub lambda_grid_len: usize,
    pub lambda_grid_min: f64,
    pub lambda_grid_max: f64,
    /// Coefficient norm beyond which a Bernoulli fit is declared separated.
    pub separation_bound: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            basis_size: 20,
            degree: 3,
            penalty_order: 2,
            max_iter: 100,
            tol: 1e-8,
            max_halvings: 20,
            lambda_grid_len: 30,
            lambda_grid_min: 1e-8,
            lambda_grid_max: 1e2,
            separation_bound: 1e6,
        }
    }
}

/// Basis-expanded design for one functional sample; reused across refits.
#[derive(Debug, Clone)]
pub struct GflmDesign {
    grid: Grid,
    spline: BSplineBasis,
    /// `T × K` spline values on the grid.
    basis_on_grid: DMatrix<f64>,
    /// `n × (K+1)`, first column all ones.
    design: DMatrix<f64>,
    /// `(K+1) × (K+1)` with a zero row/column for the intercept.
    penalty: DMatrix<f64>,
    options: FitOptions,
}

#[derive(Debug, Clone)]
pub struct GflmFit {
    pub family: Family,
    pub alpha: f64,
    pub beta_coefs: DVector<f64>,
    pub beta_curve: Vec<f64>,
    pub lambda: f64,
    pub penalty_order: usize,
    pub response: DVector<f64>,
    pub linear_predictor: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub converged: bool,
    pub separated: bool,
    pub iterations: usize,
    /// Penalized log-likelihood after each accepted step, starting value first.
    pub objective_path: Vec<f64>,
    /// Trace of the penalized hat matrix at the final iterate.
    pub edf: f64,
    pub gcv: f64,
    /// `RSS / (n − edf)` for the Gaussian family.
    pub dispersion: Option<f64>,
}

impl GflmFit {
    pub fn n(&self) -> usize {
        self.response.len()
    }

    /// Stacked `(α, β coefficients)`.
    pub fn theta(&self) -> DVector<f64> {
        let k = self.beta_coefs.len();
        DVector::from_fn(k + 1, |i, _| if i == 0 { self.alpha } else { self.beta_coefs[i - 1] })
    }

    pub fn summary(&self, grid: &Grid) -> FitSummary {
        FitSummary {
            family: self.family,
            alpha: self.alpha,
            lambda: self.lambda,
            penalty_order: self.penalty_order,
            converged: self.converged,
            separated: self.separated,
            iterations: self.iterations,
            edf: self.edf,
            gcv: self.gcv,
            dispersion: self.dispersion,
            coefficients: self.beta_coefs.iter().copied().collect(),
            grid: grid.points().to_vec(),
            beta_curve: self.beta_curve.clone(),
        }
    }
}

/// JSON export of a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub family: Family,
    pub alpha: f64,
    pub lambda: f64,
    pub penalty_order: usize,
    pub converged: bool,
    pub separated: bool,
    pub iterations: usize,
    pub edf: f64,
    pub gcv: f64,
    pub dispersion: Option<f64>,
    pub coefficients: Vec<f64>,
    pub grid: Vec<f64>,
    pub beta_curve: Vec<f64>,
}

/// Weighted penalized least-squares problem of one IRLS step.
#[derive(Debug, Clone)]
pub struct GcvIngredients {
    pub design: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub working_response: DVector<f64>,
}

impl GcvIngredients {
    fn n(&self) -> usize {
        self.design.nrows()
    }

    /// Solution, hat-matrix trace, and weighted RSS at `lambda`.
    fn solve(&self, lambda: f64) -> Result<(DVector<f64>, f64, f64)> {
        let n = self.n() as f64;
        let mut dw = self.design.clone();
        for (r, w) in self.weights.iter().enumerate() {
            dw.row_mut(r).scale_mut(*w);
        }
        let xtwx = self.design.transpose() * &dw;
        let a = &xtwx + &self.penalty * (n * lambda);
        let rhs = dw.transpose() * &self.working_response;
        let theta = solve_spd(&a, &rhs)?;
        let infl = solve_spd_matrix(&a, &xtwx)?;
        let trace = infl.trace();
        let eta = &self.design * &theta;
        let rss: f64 = self
            .weights
            .iter()
            .zip(self.working_response.iter().zip(eta.iter()))
            .map(|(w, (z, e))| w * (z - e) * (z - e))
            .sum();
        Ok((theta, trace, rss))
    }
}

/// `GCV(λ) = n·RSS_w / (n − tr H_λ)²`; infinite when `tr H_λ ≥ n`.
pub fn gcv_score(ingredients: &GcvIngredients, lambda: f64) -> Result<f64> {
    let (_, trace, rss) = ingredients.solve(lambda)?;
    Ok(gcv_from_parts(ingredients.n(), trace, rss))
}

/// `(tr H_λ, RSS_w)` at `lambda`.
pub fn gcv_parts(ingredients: &GcvIngredients, lambda: f64) -> Result<(f64, f64)> {
    let (_, trace, rss) = ingredients.solve(lambda)?;
    Ok((trace, rss))
}

/// Trace of the penalized hat matrix at `lambda`.
pub fn hat_trace(ingredients: &GcvIngredients, lambda: f64) -> Result<f64> {
    Ok(ingredients.solve(lambda)?.1)
}

fn gcv_from_parts(n: usize, trace: f64, rss: f64) -> f64 {
    let n = n as f64;
    if trace >= n {
        return f64::INFINITY;
    }
    n * rss / ((n - trace) * (n - trace))
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone()
        .svd(true, true)
        .solve(b, 1e-12)
        .map_err(|e| GofError::Numerical(format!("singular penalized system: {e}")))
}

fn solve_spd_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone()
        .svd(true, true)
        .solve(b, 1e-12)
        .map_err(|e| GofError::Numerical(format!("singular penalized system: {e}")))
}

impl GflmDesign {
    pub fn new(sample: &FunctionalSample, options: FitOptions) -> Result<Self> {
        let grid = sample.grid().clone();
        let spline = BSplineBasis::from_grid(&grid, options.basis_size, options.degree)?;
        let basis_on_grid = spline.design(&grid);
        let mut wb = basis_on_grid.clone();
        for (r, w) in grid.weights().iter().enumerate() {
            wb.row_mut(r).scale_mut(*w);
        }
        let z = sample.values() * wb;
        let n = sample.n();
        let k = spline.len();
        let mut design = DMatrix::from_element(n, k + 1, 1.0);
        design.columns_mut(1, k).copy_from(&z);
        let p = spline.penalty_matrix(options.penalty_order)?;
        let mut penalty = DMatrix::zeros(k + 1, k + 1);
        penalty.view_mut((1, 1), (k, k)).copy_from(&p);
        Ok(Self { grid, spline, basis_on_grid, design, penalty, options })
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Penalty on `(α, β)`; the intercept row and column are zero.
    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    pub fn spline(&self) -> &BSplineBasis {
        &self.spline
    }

    pub fn options(&self) -> &FitOptions {
        &self.options
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `J(β, β)` for spline coefficients `beta`.
    pub fn roughness(&self, beta: &DVector<f64>) -> f64 {
        let k = beta.len();
        let p = self.penalty.view((1, 1), (k, k));
        (beta.transpose() * p * beta)[(0, 0)]
    }

    /// Penalized log-likelihood `n⁻¹ Σ ℓ − (λ/2) θᵀSθ`.
    pub fn objective(&self, y: &DVector<f64>, family: Family, theta: &DVector<f64>, lambda: f64) -> f64 {
        let eta = &self.design * theta;
        let ll: f64 = y.iter().zip(eta.iter()).map(|(y, e)| family.loglik(*y, *e)).sum();
        let pen = (theta.transpose() * &self.penalty * theta)[(0, 0)];
        ll / self.n() as f64 - 0.5 * lambda * pen
    }

    /// Gradient of [`Self::objective`].
    pub fn gradient(&self, y: &DVector<f64>, family: Family, theta: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let eta = &self.design * theta;
        let s = DVector::from_iterator(eta.len(), y.iter().zip(eta.iter()).map(|(y, e)| family.score(*y, *e)));
        self.design.transpose() * s / self.n() as f64 - &self.penalty * theta * lambda
    }

    fn ingredients(&self, y: &DVector<f64>, family: Family, theta: &DVector<f64>) -> GcvIngredients {
        let eta = &self.design * theta;
        let weights = DVector::from_iterator(eta.len(), eta.iter().map(|e| family.neg_hessian(*e).max(1e-10)));
        let working_response = DVector::from_iterator(
            eta.len(),
            eta.iter()
                .zip(y.iter())
                .zip(weights.iter())
                .map(|((e, y), w)| e + family.score(*y, *e) / w),
        );
        GcvIngredients {
            design: self.design.clone(),
            penalty: self.penalty.clone(),
            weights,
            working_response,
        }
    }

    /// `I − H_λ` for the Gaussian-identity family: the penalized least-squares
    /// residuals at `lambda` are `M y` for every response vector `y`.
    pub fn gaussian_residual_operator(&self, lambda: f64) -> Result<DMatrix<f64>> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(GofError::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        let n = self.n();
        let a = self.design.transpose() * &self.design + &self.penalty * (n as f64 * lambda);
        let coef = solve_spd_matrix(&a, &self.design.transpose())?;
        Ok(DMatrix::identity(n, n) - &self.design * coef)
    }

    /// GCV ingredients at the final iterate of `fit`.
    pub fn gcv_ingredients(&self, fit: &GflmFit) -> GcvIngredients {
        self.ingredients(&fit.response, fit.family, &fit.theta())
    }

    /// Candidate λ values: a log-spaced grid scaled so that the penalty and the
    /// slope block of the information matrix have matching traces.
    pub fn lambda_grid(&self, y: &DVector<f64>, family: Family) -> Vec<f64> {
        let n = self.n() as f64;
        let mu = (y.sum() / n).clamp(1e-3, f64::MAX);
        let w0 = family.neg_hessian(family.link(mu)).max(1e-6);
        let k = self.spline.len();
        let slope = self.design.columns(1, k);
        let info_trace: f64 = slope.iter().map(|v| v * v).sum::<f64>() * w0 / n;
        let pen_trace = self.penalty.trace();
        let scale = if pen_trace > 0.0 && info_trace > 0.0 { info_trace / pen_trace } else { 1.0 };
        let m = self.options.lambda_grid_len.max(1);
        let (lo, hi) = (self.options.lambda_grid_min.ln(), self.options.lambda_grid_max.ln());
        (0..m)
            .map(|j| {
                let f = if m == 1 { 0.0 } else { j as f64 / (m - 1) as f64 };
                scale * (lo + f * (hi - lo)).exp()
            })
            .collect()
    }

    fn start(&self, y: &DVector<f64>, family: Family) -> DVector<f64> {
        let mut theta = DVector::zeros(self.design.ncols());
        theta[0] = family.link(y.mean());
        theta
    }

    /// Fit at a fixed λ, optionally warm-started.
    pub fn fit_fixed(
        &self,
        y: &DVector<f64>,
        family: Family,
        lambda: f64,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<GflmFit> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(GofError::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        if y.len() != self.n() {
            return Err(GofError::Dimension(format!(
                "{} responses for {} curves",
                y.len(),
                self.n()
            )));
        }
        let opts = &self.options;
        let n = self.n() as f64;
        let mut theta = warm_start.cloned().unwrap_or_else(|| self.start(y, family));
        let mut obj = self.objective(y, family, &theta, lambda);
        let mut path = vec![obj];
        let mut converged = false;
        let mut separated = false;
        let mut iterations = 0;

        for iter in 1..=opts.max_iter {
            iterations = iter;
            let eta = &self.design * &theta;
            let mut dw = self.design.clone();
            for (r, e) in eta.iter().enumerate() {
                dw.row_mut(r).scale_mut(family.neg_hessian(*e).max(1e-10));
            }
            let info = (self.design.transpose() * &dw) / n + &self.penalty * lambda;
            let grad = self.gradient(y, family, &theta, lambda);
            let delta = solve_spd(&info, &grad)?;

            let mut step = 1.0;
            let mut candidate = &theta + &delta;
            let mut cand_obj = self.objective(y, family, &candidate, lambda);
            let mut halvings = 0;
            while !(cand_obj >= obj - 1e-12 * obj.abs().max(1.0)) && halvings < opts.max_halvings {
                step *= 0.5;
                candidate = &theta + &delta * step;
                cand_obj = self.objective(y, family, &candidate, lambda);
                halvings += 1;
            }
            if !(cand_obj >= obj - 1e-12 * obj.abs().max(1.0)) {
                // No ascent along the Newton direction: at numerical optimum.
                converged = grad.norm() <= 1e-6;
                break;
            }
            let change = (&candidate - &theta).norm();
            let scale = theta.norm();
            theta = candidate;
            obj = cand_obj;
            path.push(obj);

            if family == Family::BernoulliLogit && theta.norm() > opts.separation_bound {
                separated = true;
                warn!("coefficients diverging (norm {:.3e}); likely perfect separation", theta.norm());
                break;
            }
            if change <= opts.tol * (scale + opts.tol) {
                converged = true;
                break;
            }
        }
        if family == Family::BernoulliLogit && !separated {
            // Newton steps shrink as weights vanish, so a separated fit can pass the
            // relative-change test; an (almost) exact fit of 0/1 data exposes it.
            let eta = &self.design * &theta;
            let max_gap = y
                .iter()
                .zip(eta.iter())
                .map(|(y, e)| (y - family.mean(*e)).abs())
                .fold(0.0, f64::max);
            if max_gap < 1e-6 {
                separated = true;
                converged = false;
                warn!("fitted probabilities reproduce the 0/1 responses; likely perfect separation");
            }
        }
        if !converged && !separated {
            warn!("penalized IRLS did not converge after {iterations} iterations");
        }

        let ingredients = self.ingredients(y, family, &theta);
        let (_, edf, rss) = ingredients.solve(lambda)?;
        let gcv = gcv_from_parts(self.n(), edf, rss);
        Ok(self.assemble(y, family, theta, lambda, converged, separated, iterations, path, edf, gcv))
    }

    /// Fit with λ fixed or chosen by GCV over [`Self::lambda_grid`].
    pub fn fit(&self, y: &DVector<f64>, family: Family, lambda: LambdaChoice) -> Result<GflmFit> {
        match lambda {
            LambdaChoice::Fixed(l) => self.fit_fixed(y, family, l, None),
            LambdaChoice::Auto => {
                let grid = self.lambda_grid(y, family);
                let mut best: Option<GflmFit> = None;
                let mut warm: Option<DVector<f64>> = None;
                // Largest λ first: smoother fits make better warm starts.
                for &l in grid.iter().rev() {
                    let fit = self.fit_fixed(y, family, l, warm.as_ref())?;
                    warm = Some(fit.theta());
                    let better = match &best {
                        None => true,
                        Some(b) => fit.gcv < b.gcv || (fit.gcv == b.gcv && fit.lambda < b.lambda),
                    };
                    if better && fit.gcv.is_finite() && !fit.separated {
                        best = Some(fit);
                    }
                }
                best.ok_or_else(|| GofError::Numerical("no λ on the grid gave a finite GCV score".into()))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        y: &DVector<f64>,
        family: Family,
        theta: DVector<f64>,
        lambda: f64,
        converged: bool,
        separated: bool,
        iterations: usize,
        objective_path: Vec<f64>,
        edf: f64,
        gcv: f64,
    ) -> GflmFit {
        let k = self.spline.len();
        let beta_coefs = theta.rows(1, k).into_owned();
        let beta_curve: Vec<f64> = (&self.basis_on_grid * &beta_coefs).iter().copied().collect();
        let eta = &self.design * &theta;
        let fitted = eta.map(|e| family.mean(e));
        let residuals = y - &fitted;
        let n = self.n() as f64;
        let dispersion = (family == Family::GaussianIdentity && n > edf)
            .then(|| residuals.norm_squared() / (n - edf));
        GflmFit {
            family,
            alpha: theta[0],
            beta_coefs,
            beta_curve,
            lambda,
            penalty_order: self.options.penalty_order,
            response: y.clone(),
            linear_predictor: eta,
            fitted,
            residuals,
            converged,
            separated,
            iterations,
            objective_path,
            edf,
            gcv,
            dispersion,
        }
    }
}

/// Builds the design and fits in one call.
pub fn fit_gflm(
    sample: &FunctionalSample,
    response: &ScalarResponse,
    family: Family,
    lambda: LambdaChoice,
    basis_size: usize,
) -> Result<GflmFit> {
    if response.len() != sample.n() {
        return Err(GofError::Dimension(format!(
            "{} responses for {} curves",
            response.len(),
            sample.n()
        )));
    }
    if family.response_family() != response.family() {
        return Err(GofError::InvalidResponse(format!(
            "family {family:?} does not match {:?} responses",
            response.family()
        )));
    }
    let options = FitOptions { basis_size, ..FitOptions::default() };
    let design = GflmDesign::new(sample, options)?;
    design.fit(response.values(), family, lambda)
}

/// Score residuals `ℓ̇_a(Y_i; η̂_i)`. For the three canonical families these
/// equal the raw residuals `Y_i − F(η̂_i)`.
pub fn score_residual(fit: &GflmFit, family: Family) -> DVector<f64> {
    DVector::from_iterator(
        fit.n(),
        fit.response
            .iter()
            .zip(fit.linear_predictor.iter())
            .map(|(y, e)| family.score(*y, *e)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::{gen_example1, gen_example2};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ex1(n: usize, seed: u64) -> (FunctionalSample, ScalarResponse, Vec<f64>) {
        let d = gen_example1(n, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (d.sample, d.response, d.beta)
    }

    fn closed_form(design: &GflmDesign, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let d = design.design();
        let n = design.n() as f64;
        let a = d.transpose() * d + design.penalty() * (n * lambda);
        a.lu().solve(&(d.transpose() * y)).unwrap()
    }

    #[test]
    fn gaussian_matches_closed_form() {
        let (s, r, _) = ex1(80, 1);
        let design = GflmDesign::new(&s, FitOptions::default()).unwrap();
        for &lambda in &[1e-6, 1e-3, 0.1] {
            let fit = design.fit_fixed(r.values(), Family::GaussianIdentity, lambda, None).unwrap();
            assert!(fit.converged);
            let exact = closed_form(&design, r.values(), lambda);
            let diff = (fit.theta() - &exact).abs().max();
            assert!(diff < 1e-8 * (1.0 + exact.abs().max()), "λ={lambda}: diff {diff}");
            assert_eq!(fit.residuals, r.values() - &fit.fitted);
        }
    }

    #[test]
    fn residual_operator_matches_refit() {
        let (s, r, _) = ex1(60, 4);
        let design = GflmDesign::new(&s, FitOptions::default()).unwrap();
        for &lambda in &[1e-6, 1e-2] {
            let m = design.gaussian_residual_operator(lambda).unwrap();
            let fit = design.fit_fixed(r.values(), Family::GaussianIdentity, lambda, None).unwrap();
            let diff = (&m * r.values() - &fit.residuals).abs().max();
            assert!(diff < 1e-8, "λ={lambda}: diff {diff}");
            // residuals sum to zero because the intercept is unpenalized
            assert!((m.transpose() * DVector::from_element(60, 1.0)).abs().max() < 1e-9);
        }
        assert!(design.gaussian_residual_operator(-1.0).is_err());
    }

    #[test]
    fn constant_response_gives_flat_slope() {
        let (s, _, _) = ex1(40, 2);
        let y = DVector::from_element(40, 2.5);
        let design = GflmDesign::new(&s, FitOptions::default()).unwrap();
        let fit = design.fit_fixed(&y, Family::GaussianIdentity, 1e-3, None).unwrap();
        assert_abs_diff_eq!(fit.alpha, 2.5, epsilon = 1e-10);
        assert!(fit.beta_coefs.abs().max() < 1e-8);
    }

    #[test]
    fn objective_monotone_and_gradient_small() {
        let d = gen_example2(100, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let design = GflmDesign::new(&d.sample, FitOptions::default()).unwrap();
        for &lambda in &[1e-5, 1e-2] {
            let fit = design.fit_fixed(d.response.values(), Family::BernoulliLogit, lambda, None).unwrap();
            assert!(fit.converged);
            assert!(fit.objective_path.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            let g = design.gradient(d.response.values(), Family::BernoulliLogit, &fit.theta(), lambda);
            assert!(g.norm() <= 1e-6, "gradient {}", g.norm());
        }
    }

    #[test]
    fn poisson_fit_converges() {
        let (s, _, beta) = ex1(120, 4);
        let eta = s.project(&beta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = eta
            .iter()
            .map(|e| {
                let mu = (0.5 + 0.3 * e).exp();
                rand_distr::Distribution::sample(&rand_distr::Poisson::new(mu).unwrap(), &mut rng)
            })
            .collect();
        let r = ScalarResponse::new(y, ResponseFamily::Poisson).unwrap();
        let fit = fit_gflm(&s, &r, Family::PoissonLog, LambdaChoice::Auto, 20).unwrap();
        assert!(fit.converged);
        assert!(fit.fitted.iter().all(|m| *m > 0.0));
    }

    #[test]
    fn separation_is_flagged() {
        // Constant curves: the slope direction lies in the penalty null space.
        let grid = Grid::uniform(50).unwrap();
        let c = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let x = DMatrix::from_fn(6, 50, |i, _| c[i]);
        let s = FunctionalSample::new(grid, x).unwrap();
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let design = GflmDesign::new(&s, FitOptions::default()).unwrap();
        let fit = design.fit_fixed(&y, Family::BernoulliLogit, 1e-3, None).unwrap();
        assert!(fit.separated);
        assert!(!fit.converged);
    }

    #[test]
    fn consistency_in_n() {
        let l2 = |n: usize, seed: u64| -> f64 {
            let (s, r, beta) = ex1(n, seed);
            let fit = fit_gflm(&s, &r, Family::GaussianIdentity, LambdaChoice::Auto, 20).unwrap();
            let diff: Vec<f64> = fit.beta_curve.iter().zip(&beta).map(|(a, b)| a - b).collect();
            s.grid().inner_product(&diff, &diff).unwrap().sqrt()
        };
        let median = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            0.5 * (v[9] + v[10])
        };
        let small = median((0..20).map(|s| l2(50, 100 + s)).collect());
        let large = median((0..20).map(|s| l2(200, 200 + s)).collect());
        assert!(large < small, "median L2 error n=200 {large} vs n=50 {small}");
    }

    #[test]
    fn gcv_trace_tends_to_null_space_dimension() {
        let (s, r, _) = ex1(60, 6);
        let design = GflmDesign::new(&s, FitOptions::default()).unwrap();
        let fit = design.fit_fixed(r.values(), Family::GaussianIdentity, 1.0, None).unwrap();
        let ing = design.gcv_ingredients(&fit);
        let grid = design.lambda_grid(r.values(), Family::GaussianIdentity);
        let scale = grid[0] / 1e-8;
        // Beyond ~1e8·scale the system loses the null space to rounding.
        let traces: Vec<f64> = [1e2, 1e4, 1e6]
            .iter()
            .map(|m| hat_trace(&ing, m * scale).unwrap())
            .collect();
        assert!(traces.windows(2).all(|w| w[1] < w[0]));
        assert_abs_diff_eq!(traces[2], 3.0, epsilon = 1e-2);
        assert!(traces[2] > 3.0 - 1e-9);
        for l in grid {
            assert!(gcv_score(&ing, l).unwrap().is_finite());
        }
    }

    #[test]
    fn gcv_argmin_stable_under_duplication() {
        let (s, r, _) = ex1(50, 7);
        let design = GflmDesign::new(&s, FitOptions::default()).unwrap();
        let grid = design.lambda_grid(r.values(), Family::GaussianIdentity);
        let fit = design.fit_fixed(r.values(), Family::GaussianIdentity, 1.0, None).unwrap();
        let ing = design.gcv_ingredients(&fit);

        let n = s.n();
        let x2 = DMatrix::from_fn(2 * n, s.grid().len(), |i, c| s.values()[(i % n, c)]);
        let s2 = FunctionalSample::new(s.grid().clone(), x2).unwrap();
        let y2 = DVector::from_fn(2 * n, |i, _| r.values()[i % n]);
        let design2 = GflmDesign::new(&s2, FitOptions::default()).unwrap();
        let grid2 = design2.lambda_grid(&y2, Family::GaussianIdentity);
        for (a, b) in grid.iter().zip(&grid2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12 * a.abs());
        }
        let fit2 = design2.fit_fixed(&y2, Family::GaussianIdentity, 1.0, None).unwrap();
        let ing2 = design2.gcv_ingredients(&fit2);

        // Doubling keeps tr H_λ and doubles RSS, so GCV with the sample count
        // rescaled back to n is exactly 2·GCV on the original data.
        let mut scores = Vec::new();
        for &l in &grid {
            let (t1, rss1) = gcv_parts(&ing, l).unwrap();
            let (t2, rss2) = gcv_parts(&ing2, l).unwrap();
            assert_abs_diff_eq!(t1, t2, epsilon = 1e-8 * t1);
            assert_abs_diff_eq!(2.0 * rss1, rss2, epsilon = 1e-8 * rss2);
            let rescaled = n as f64 * rss2 / ((n as f64 - t2) * (n as f64 - t2));
            scores.push((gcv_score(&ing, l).unwrap(), rescaled));
        }
        let argmin = |f: &dyn Fn(&(f64, f64)) -> f64| {
            (0..scores.len()).min_by(|&a, &b| f(&scores[a]).total_cmp(&f(&scores[b]))).unwrap()
        };
        assert_eq!(argmin(&|s| s.0), argmin(&|s| s.1));
    }

    #[test]
    fn score_residuals_equal_raw_residuals() {
        let (s, r, _) = ex1(30, 8);
        let fit = fit_gflm(&s, &r, Family::GaussianIdentity, LambdaChoice::Fixed(1e-3), 20).unwrap();
        let eps = score_residual(&fit, Family::GaussianIdentity);
        assert!((&eps - &fit.residuals).abs().max() < 1e-14);

        let d = gen_example2(60, 0.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let fit = fit_gflm(&d.sample, &d.response, Family::BernoulliLogit, LambdaChoice::Fixed(1e-3), 20).unwrap();
        let eps = score_residual(&fit, Family::BernoulliLogit);
        for i in 0..60 {
            let expected = d.response.values()[i] - expit(fit.linear_predictor[i]);
            assert_abs_diff_eq!(eps[i], expected, epsilon = 1e-14);
            assert_abs_diff_eq!(eps[i], fit.residuals[i], epsilon = 1e-14);
        }

        for &(y, e) in &[(3.0, 0.2), (0.0, -1.0)] {
            assert_abs_diff_eq!(Family::PoissonLog.score(y, e), y - f64::exp(e), epsilon = 1e-15);
        }
    }

    #[test]
    fn family_mismatch_rejected() {
        let (s, r, _) = ex1(10, 1);
        assert!(fit_gflm(&s, &r, Family::BernoulliLogit, LambdaChoice::Auto, 20).is_err());
    }

    #[test]
    fn family_derivatives_by_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-5;
        for fam in [Family::GaussianIdentity, Family::BernoulliLogit, Family::PoissonLog] {
            for _ in 0..20 {
                let eta: f64 = rng.random_range(-3.0..3.0);
                let y = match fam {
                    Family::GaussianIdentity => rng.random_range(-2.0..2.0),
                    Family::BernoulliLogit => f64::from(rng.random_bool(0.5)),
                    Family::PoissonLog => rng.random_range(0..6) as f64,
                };
                let d1 = (fam.loglik(y, eta + h) - fam.loglik(y, eta - h)) / (2.0 * h);
                assert_abs_diff_eq!(d1, fam.score(y, eta), epsilon = 1e-6);
                let d2 = (fam.score(y, eta + h) - fam.score(y, eta - h)) / (2.0 * h);
                assert_abs_diff_eq!(-d2, fam.neg_hessian(eta), epsilon = 1e-6);
                assert!(fam.neg_hessian(eta) > 0.0);
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn more_smoothing_less_roughness(log_lambda in -9.0f64..0.0, seed in 0u64..1000) {
            let (s, r, _) = ex1(40, seed);
            let design = GflmDesign::new(&s, FitOptions::default()).unwrap();
            let lambda = 10f64.powf(log_lambda);
            let f1 = design.fit_fixed(r.values(), Family::GaussianIdentity, lambda, None).unwrap();
            let f2 = design.fit_fixed(r.values(), Family::GaussianIdentity, 2.0 * lambda, None).unwrap();
            let j1 = design.roughness(&f1.beta_coefs);
            let j2 = design.roughness(&f2.beta_coefs);
            proptest::prop_assert!(j2 <= j1 * (1.0 + 1e-8) + 1e-12, "J(2λ)={} > J(λ)={}", j2, j1);
        }
    }
}
