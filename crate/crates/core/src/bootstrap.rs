//! Bootstrap calibration of the angle-kernel statistic.
//!
//! Continuous responses use a wild bootstrap with two-point weights; binary
//! responses regenerate Bernoulli outcomes from permuted fitted probabilities.
//! Every replicate refits the model at the original λ, and the FPCA basis and
//! number of components stay fixed at their values from the observed sample.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GofError, Result};
use crate::fpca::{fit_fpca_full, FpcaBasis};
use crate::funcdata::{FunctionalSample, ScalarResponse};
use crate::gflm::{score_residual, Family, FitOptions, GflmDesign, GflmFit};
use crate::gof::AngleKernel;

pub const MIN_REPLICATES: usize = 100;

/// Clamp range for fitted probabilities in the binary scheme.
pub const PROB_FLOOR: f64 = 1e-10;

/// Statistics smaller than this multiple of `π·‖Y‖²/n` are below rounding
/// resolution and are treated as exactly zero.
const ZERO_RESOLUTION: f64 = 1e-13;

fn sqrt5() -> f64 {
    5.0_f64.sqrt()
}

/// The two atoms of the wild-bootstrap law, smaller first.
pub fn wild_atoms() -> [f64; 2] {
    [(1.0 - sqrt5()) / 2.0, (1.0 + sqrt5()) / 2.0]
}

/// Probabilities of [`wild_atoms`], in the same order.
pub fn wild_probabilities() -> [f64; 2] {
    [(5.0 + sqrt5()) / 10.0, (5.0 - sqrt5()) / 10.0]
}

/// `n` i.i.d. draws from the two-point law with mean 0 and variance 1.
pub fn wild_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    let [lo, hi] = wild_atoms();
    let p_lo = wild_probabilities()[0];
    DVector::from_fn(n, |_, _| if rng.random::<f64>() < p_lo { lo } else { hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Wild,
    BinaryModelBased,
}

impl Scheme {
    pub fn for_family(family: Family) -> Result<Self> {
        match family {
            Family::GaussianIdentity => Ok(Scheme::Wild),
            Family::BernoulliLogit => Ok(Scheme::BinaryModelBased),
            Family::PoissonLog => Err(GofError::InvalidArgument(
                "no bootstrap scheme for Poisson responses".into(),
            )),
        }
    }

    fn family(self) -> Family {
        match self {
            Scheme::Wild => Family::GaussianIdentity,
            Scheme::BinaryModelBased => Family::BernoulliLogit,
        }
    }
}

/// How many principal components enter the statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PMode {
    /// Smallest p reaching this cumulative explained-variance ratio.
    DataDriven { threshold: f64 },
    Fixed(usize),
}

impl Default for PMode {
    fn default() -> Self {
        PMode::DataDriven { threshold: 0.95 }
    }
}

impl PMode {
    pub fn resolve(&self, basis: &FpcaBasis) -> Result<usize> {
        match *self {
            PMode::DataDriven { threshold } => basis.select_p(threshold),
            PMode::Fixed(p) => {
                if p == 0 || p > basis.n_components() {
                    Err(GofError::InvalidArgument(format!(
                        "fixed p = {p} outside 1..={}",
                        basis.n_components()
                    )))
                } else {
                    Ok(p)
                }
            }
        }
    }
}

impl fmt::Display for PMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PMode::DataDriven { threshold } if *threshold == 0.95 => write!(f, "auto"),
            PMode::DataDriven { threshold } => write!(f, "auto:{threshold}"),
            PMode::Fixed(p) => write!(f, "fixed:{p}"),
        }
    }
}

impl FromStr for PMode {
    type Err = GofError;

    /// Accepts `auto`, `auto:<threshold>` and `fixed:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GofError::Config(format!("invalid p mode {s:?}; expected auto, auto:<t> or fixed:<k>"));
        let s = s.trim();
        if s == "auto" {
            return Ok(PMode::default());
        }
        if let Some(t) = s.strip_prefix("auto:") {
            let threshold: f64 = t.parse().map_err(|_| bad())?;
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(bad());
            }
            return Ok(PMode::DataDriven { threshold });
        }
        if let Some(k) = s.strip_prefix("fixed:") {
            let p: usize = k.parse().map_err(|_| bad())?;
            if p == 0 {
                return Err(bad());
            }
            return Ok(PMode::Fixed(p));
        }
        Err(bad())
    }
}

impl TryFrom<String> for PMode {
    type Error = GofError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PMode> for String {
    fn from(m: PMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub t_n: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boot_stats: Vec<f64>,
    pub p_value: f64,
    pub critical_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub scheme: Scheme,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    /// Number of principal components used.
    pub p: usize,
    /// Replicates that failed once and were redrawn.
    pub redrawn_replicates: usize,
}

impl GofResult {
    fn from_stats(t_n: f64, boot_stats: Vec<f64>, alpha: f64, scheme: Scheme, seed: u64, p: usize, redrawn: usize) -> Self {
        let b = boot_stats.len();
        let p_value = p_value(t_n, &boot_stats);
        let critical_value = critical_value(&boot_stats, alpha);
        GofResult {
            t_n,
            boot_stats,
            p_value,
            critical_value,
            alpha,
            reject: p_value < alpha,
            scheme,
            b,
            seed,
            p,
            redrawn_replicates: redrawn,
        }
    }

    /// JSON text; `boot_stats` is left out unless `with_boot_stats`.
    pub fn to_json(&self, with_boot_stats: bool) -> Result<String> {
        if with_boot_stats {
            Ok(serde_json::to_string_pretty(self)?)
        } else {
            let slim = GofResult { boot_stats: Vec::new(), ..self.clone() };
            Ok(serde_json::to_string_pretty(&slim)?)
        }
    }
}

/// `B⁻¹ Σ I(T*ʲ ≥ T)`.
pub fn p_value(t_n: f64, boot_stats: &[f64]) -> f64 {
    if boot_stats.is_empty() {
        return f64::NAN;
    }
    boot_stats.iter().filter(|&&t| t >= t_n).count() as f64 / boot_stats.len() as f64
}

/// Order statistic `⌈(1−α)B⌉` (1-based) of the replicate statistics.
pub fn critical_value(boot_stats: &[f64], alpha: f64) -> f64 {
    if boot_stats.is_empty() {
        return f64::NAN;
    }
    let mut sorted = boot_stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let k = ((1.0 - alpha) * b as f64 - 1e-9).ceil().clamp(1.0, b as f64) as usize;
    sorted[k - 1]
}

/// Observed and replicate statistics for several choices of p, sharing one set
/// of bootstrap refits.
#[derive(Debug, Clone)]
pub struct BootstrapRun {
    pub scheme: Scheme,
    pub seed: u64,
    pub p_values: Vec<usize>,
    pub t_n: Vec<f64>,
    /// `boot_stats[k][j]`: replicate `j` under `p_values[k]`.
    pub boot_stats: Vec<Vec<f64>>,
    pub redrawn_replicates: usize,
}

impl BootstrapRun {
    pub fn b(&self) -> usize {
        self.boot_stats.first().map_or(0, Vec::len)
    }

    /// Test outcome at level `alpha` for the `idx`-th p.
    pub fn result(&self, idx: usize, alpha: f64) -> GofResult {
        GofResult::from_stats(
            self.t_n[idx],
            self.boot_stats[idx].clone(),
            alpha,
            self.scheme,
            self.seed,
            self.p_values[idx],
            self.redrawn_replicates,
        )
    }
}

/// Random stream for replicate `j` of a run seeded by `seed`.
pub fn replicate_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(GofError::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")))
    }
}

fn zero_threshold(y: &DVector<f64>) -> f64 {
    ZERO_RESOLUTION * std::f64::consts::PI * y.norm_squared() / y.len() as f64
}

fn snap(t: f64, tiny: f64) -> f64 {
    if t.abs() <= tiny {
        0.0
    } else {
        t
    }
}

fn replicate_ok(fit: &GflmFit) -> bool {
    fit.converged && !fit.separated && fit.residuals.iter().all(|r| r.is_finite())
}

/// Runs `b` bootstrap replicates for every p in `p_values`.
///
/// `design` must be the design the original `fit` was computed on and
/// `basis` the FPCA of the same sample.
pub fn run_bootstrap(
    design: &GflmDesign,
    basis: &FpcaBasis,
    fit: &GflmFit,
    scheme: Scheme,
    p_values: &[usize],
    b: usize,
    seed: u64,
) -> Result<BootstrapRun> {
    let family = scheme.family();
    if fit.family != family {
        return Err(GofError::InvalidArgument(format!(
            "{scheme:?} bootstrap needs a {family:?} fit, got {:?}",
            fit.family
        )));
    }
    if b < MIN_REPLICATES {
        return Err(GofError::InvalidArgument(format!(
            "need at least {MIN_REPLICATES} bootstrap replicates, got {b}"
        )));
    }
    if p_values.is_empty() {
        return Err(GofError::InvalidArgument("no p values requested".into()));
    }
    let n = fit.n();
    if design.n() != n || basis.scores().nrows() != n {
        return Err(GofError::Dimension(format!(
            "fit has {n} observations, design {} and FPCA {}",
            design.n(),
            basis.scores().nrows()
        )));
    }

    let kernels = p_values
        .iter()
        .map(|&p| AngleKernel::new(&basis.scores_truncated(p)?))
        .collect::<Result<Vec<_>>>()?;
    let tiny = zero_threshold(&fit.response);
    let observed = score_residual(fit, family);
    let t_n = kernels
        .iter()
        .map(|k| k.statistic(&observed).map(|t| snap(t, tiny)))
        .collect::<Result<Vec<_>>>()?;

    let probs: Vec<f64> = match scheme {
        Scheme::Wild => Vec::new(),
        Scheme::BinaryModelBased => {
            let clamped: Vec<f64> = fit.fitted.iter().map(|p| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)).collect();
            let moved = clamped.iter().zip(fit.fitted.iter()).filter(|(a, b)| a != b).count();
            if moved > 0 {
                warn!("{moved} fitted probabilities clamped to [{PROB_FLOOR:e}, 1 - {PROB_FLOOR:e}]");
            }
            clamped
        }
    };
    let theta = fit.theta();
    // Gaussian refits at fixed λ are linear in the response.
    let residual_operator = match scheme {
        Scheme::Wild => Some(design.gaussian_residual_operator(fit.lambda)?),
        Scheme::BinaryModelBased => None,
    };

    let draw = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        match scheme {
            Scheme::Wild => {
                let v = wild_weights(n, rng);
                &fit.fitted + fit.residuals.component_mul(&v)
            }
            Scheme::BinaryModelBased => {
                let mut p = probs.clone();
                p.shuffle(rng);
                DVector::from_iterator(n, p.iter().map(|&pi| if rng.random::<f64>() < pi { 1.0 } else { 0.0 }))
            }
        }
    };

    // Refit residuals for one replicate response, or why the refit failed.
    let refit_residuals = |y_star: &DVector<f64>| -> std::result::Result<DVector<f64>, String> {
        if let Some(m) = &residual_operator {
            return Ok(m * y_star);
        }
        match design.fit_fixed(y_star, family, fit.lambda, Some(&theta)) {
            Ok(refit) if replicate_ok(&refit) => Ok(score_residual(&refit, family)),
            Ok(refit) => Err(format!(
                "refit failed (converged = {}, separated = {}, iterations = {})",
                refit.converged, refit.separated, refit.iterations
            )),
            Err(e) => Err(e.to_string()),
        }
    };

    let one = |j: usize| -> Result<(Vec<f64>, bool)> {
        let mut rng = replicate_rng(seed, j);
        let mut last_err = String::new();
        for attempt in 0..2 {
            let y_star = draw(&mut rng);
            match refit_residuals(&y_star) {
                Ok(r) => {
                    let tiny = zero_threshold(&y_star);
                    let stats = kernels
                        .iter()
                        .map(|k| k.statistic(&r).map(|t| snap(t, tiny)))
                        .collect::<Result<Vec<_>>>()?;
                    if stats.iter().all(|t| t.is_finite()) {
                        return Ok((stats, attempt > 0));
                    }
                    last_err = "non-finite replicate statistic".into();
                }
                Err(e) => last_err = e,
            }
            warn!("bootstrap replicate {j}, attempt {}: {last_err}", attempt + 1);
        }
        Err(GofError::Numerical(format!(
            "bootstrap replicate {j} failed twice in a row: {last_err}"
        )))
    };

    let reps: Vec<(Vec<f64>, bool)> = (0..b).into_par_iter().map(one).collect::<Result<Vec<_>>>()?;
    let redrawn_replicates = reps.iter().filter(|(_, r)| *r).count();
    let mut boot_stats = vec![Vec::with_capacity(b); p_values.len()];
    for (stats, _) in &reps {
        for (k, t) in stats.iter().enumerate() {
            boot_stats[k].push(*t);
        }
    }
    Ok(BootstrapRun {
        scheme,
        seed,
        p_values: p_values.to_vec(),
        t_n,
        boot_stats,
        redrawn_replicates,
    })
}

fn options_for(fit: &GflmFit) -> FitOptions {
    FitOptions {
        basis_size: fit.beta_coefs.len(),
        penalty_order: fit.penalty_order,
        ..FitOptions::default()
    }
}

#[allow(clippy::too_many_arguments)]
fn single_test(
    sample: &FunctionalSample,
    response: &ScalarResponse,
    fit: &GflmFit,
    family: Family,
    scheme: Scheme,
    b: usize,
    alpha: f64,
    p_mode: PMode,
    seed: u64,
) -> Result<GofResult> {
    check_alpha(alpha)?;
    if Scheme::for_family(family)? != scheme || fit.family != family {
        return Err(GofError::InvalidArgument(format!(
            "{scheme:?} bootstrap does not apply to family {family:?} (fit family {:?})",
            fit.family
        )));
    }
    if response.family() != family.response_family() {
        return Err(GofError::InvalidResponse(format!(
            "{:?} responses for family {family:?}",
            response.family()
        )));
    }
    if response.values() != &fit.response {
        return Err(GofError::InvalidArgument("fit was computed on a different response".into()));
    }
    let design = GflmDesign::new(sample, options_for(fit))?;
    let basis = fit_fpca_full(sample)?;
    let p = p_mode.resolve(&basis)?;
    let run = run_bootstrap(&design, &basis, fit, scheme, &[p], b, seed)?;
    Ok(run.result(0, alpha))
}

/// Wild-bootstrap test for a Gaussian-identity fit.
#[allow(clippy::too_many_arguments)]
pub fn wild_bootstrap_test(
    sample: &FunctionalSample,
    response: &ScalarResponse,
    fit: &GflmFit,
    family: Family,
    b: usize,
    alpha: f64,
    p_mode: PMode,
    seed: u64,
) -> Result<GofResult> {
    single_test(sample, response, fit, family, Scheme::Wild, b, alpha, p_mode, seed)
}

/// Model-based bootstrap test for a Bernoulli-logit fit.
#[allow(clippy::too_many_arguments)]
pub fn binary_bootstrap_test(
    sample: &FunctionalSample,
    response: &ScalarResponse,
    fit: &GflmFit,
    family: Family,
    b: usize,
    alpha: f64,
    p_mode: PMode,
    seed: u64,
) -> Result<GofResult> {
    single_test(sample, response, fit, family, Scheme::BinaryModelBased, b, alpha, p_mode, seed)
}
