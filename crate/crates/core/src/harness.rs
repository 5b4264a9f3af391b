//! Monte Carlo size/power experiments over a grid of sample sizes, deviation
//! levels, significance levels and choices of p.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{p_value, run_bootstrap, PMode, Scheme, MIN_REPLICATES};
use crate::error::{GofError, Result};
use crate::fpca::fit_fpca_full;
use crate::funcdata::{gen_example1, gen_example2, SimulatedData};
use crate::gflm::{Family, FitOptions, GflmDesign, LambdaChoice};

/// Column order of the rates CSV.
pub const CSV_COLUMNS: [&str; 14] = [
    "example",
    "n",
    "a",
    "alpha",
    "p_mode",
    "reps",
    "valid_reps",
    "failed_reps",
    "rejections",
    "rate",
    "mc_se",
    "mean_p",
    "mean_p_value",
    "invalid",
];

/// Share of failed replicates above which a cell is marked invalid.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Example {
    /// Functional linear model with Gaussian errors.
    Example1,
    /// Logistic functional model.
    Example2,
}

impl Example {
    pub fn family(self) -> Family {
        match self {
            Example::Example1 => Family::GaussianIdentity,
            Example::Example2 => Family::BernoulliLogit,
        }
    }

    pub fn default_a_list(self) -> Vec<f64> {
        match self {
            Example::Example1 => vec![0.0, 0.05, 0.1, 0.15, 0.2],
            Example::Example2 => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }

    pub fn generate(self, n: usize, a: f64, rng: &mut ChaCha8Rng) -> Result<SimulatedData> {
        match self {
            Example::Example1 => gen_example1(n, a, rng),
            Example::Example2 => gen_example2(n, a, rng),
        }
    }
}

impl std::fmt::Display for Example {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Example::Example1 => "example1",
            Example::Example2 => "example2",
        })
    }
}

fn default_n_list() -> Vec<usize> {
    vec![50, 100]
}
fn default_alpha_list() -> Vec<f64> {
    vec![0.01, 0.05, 0.1]
}
fn default_reps() -> usize {
    200
}
fn default_b() -> usize {
    500
}
fn default_p_modes() -> Vec<PMode> {
    vec![PMode::default()]
}
fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub example: Example,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    /// Defaults to the example's own deviation grid when absent.
    #[serde(default)]
    pub a_list: Option<Vec<f64>>,
    #[serde(default = "default_alpha_list")]
    pub alpha_list: Vec<f64>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(rename = "B", alias = "b", default = "default_b")]
    pub b: usize,
    #[serde(alias = "p_mode", default = "default_p_modes")]
    pub p_modes: Vec<PMode>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// JSON report path; the CSV goes next to it with a `.csv` extension.
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `example`.
    pub fn desk(example: Example) -> Self {
        ExperimentConfig {
            example,
            n_list: default_n_list(),
            a_list: Some(example.default_a_list()),
            alpha_list: default_alpha_list(),
            reps: default_reps(),
            b: default_b(),
            p_modes: default_p_modes(),
            seed: default_seed(),
            output_path: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| GofError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GofError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn a_values(&self) -> Vec<f64> {
        self.a_list.clone().unwrap_or_else(|| self.example.default_a_list())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GofError::Config(m));
        if self.reps == 0 {
            return fail("reps must be at least 1".into());
        }
        if self.b < MIN_REPLICATES {
            return fail(format!("B must be at least {MIN_REPLICATES}, got {}", self.b));
        }
        if self.n_list.is_empty() || self.n_list.iter().any(|&n| n < 3) {
            return fail(format!("n_list must be nonempty with every n >= 3, got {:?}", self.n_list));
        }
        let a = self.a_values();
        if a.is_empty() || a.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return fail(format!("a_list must be nonempty with every a >= 0, got {a:?}"));
        }
        if self.alpha_list.is_empty() || self.alpha_list.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return fail(format!("alpha_list must be nonempty within (0, 1), got {:?}", self.alpha_list));
        }
        if self.p_modes.is_empty() {
            return fail("p_modes must be nonempty".into());
        }
        for m in &self.p_modes {
            if let PMode::Fixed(p) = m {
                if let Some(&n) = self.n_list.iter().find(|&&n| *p > n - 1) {
                    return fail(format!("fixed p = {p} exceeds n - 1 for n = {n}"));
                }
            }
        }
        Ok(())
    }

    pub fn csv_path(&self) -> Option<PathBuf> {
        self.output_path.as_ref().map(|p| p.with_extension("csv"))
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replicate `rep` of design cell `cell`; independent of scheduling.
pub fn stream_seed(seed: u64, cell: u64, rep: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ cell) ^ rep)
}

/// Outcome of one Monte Carlo replicate, one entry per p mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub p_used: Vec<usize>,
    pub t_n: Vec<f64>,
    pub p_values: Vec<f64>,
}

/// Generates one data set, fits the null model, and bootstraps every p mode.
pub fn run_replicate(
    example: Example,
    n: usize,
    a: f64,
    b: usize,
    p_modes: &[PMode],
    seed: u64,
) -> Result<ReplicateOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = example.generate(n, a, &mut rng)?;
    let family = example.family();
    let design = GflmDesign::new(&data.sample, FitOptions::default())?;
    let fit = design.fit(data.response.values(), family, LambdaChoice::Auto)?;
    if fit.separated || !fit.converged {
        return Err(GofError::Numerical(format!(
            "null fit failed (converged = {}, separated = {})",
            fit.converged, fit.separated
        )));
    }
    let basis = fit_fpca_full(&data.sample)?;
    let p_used = p_modes.iter().map(|m| m.resolve(&basis)).collect::<Result<Vec<_>>>()?;
    let mut distinct = p_used.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let run = run_bootstrap(&design, &basis, &fit, Scheme::for_family(family)?, &distinct, b, mix64(seed))?;
    let mut t_n = Vec::with_capacity(p_used.len());
    let mut p_values = Vec::with_capacity(p_used.len());
    for p in &p_used {
        let k = distinct.binary_search(p).expect("p is in the distinct list");
        t_n.push(run.t_n[k]);
        p_values.push(p_value(run.t_n[k], &run.boot_stats[k]));
    }
    Ok(ReplicateOutcome { p_used, t_n, p_values })
}

/// All replicates of one `(n, a)` design cell, in replicate order.
pub fn run_design_cell(config: &ExperimentConfig, cell: usize, n: usize, a: f64) -> Vec<Result<ReplicateOutcome>> {
    (0..config.reps)
        .into_par_iter()
        .map(|r| {
            let seed = stream_seed(config.seed, cell as u64, r as u64);
            run_replicate(config.example, n, a, config.b, &config.p_modes, seed).inspect_err(|e| {
                warn!("n = {n}, a = {a}, replicate {r}: {e}");
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub n: usize,
    pub a: f64,
    pub alpha: f64,
    pub p_mode: PMode,
    pub reps: usize,
    pub valid_reps: usize,
    pub failed_reps: usize,
    pub rejections: usize,
    /// Rejection rate over valid replicates.
    pub rate: f64,
    /// `√(rate(1−rate)/valid_reps)`.
    pub mc_se: f64,
    /// Average number of components used.
    pub mean_p: f64,
    pub mean_p_value: f64,
    /// More than 1% of replicates failed.
    pub invalid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub wall_clock_seconds: f64,
    /// Seconds since the Unix epoch at the start of the run.
    pub started_at: u64,
    pub threads: usize,
    pub version: String,
}

impl ExperimentReport {
    pub fn cell(&self, n: usize, a: f64, alpha: f64, p_mode: PMode) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.n == n && c.a == a && c.alpha == alpha && c.p_mode == p_mode)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_COLUMNS)?;
        for c in &self.cells {
            w.write_record([
                self.config.example.to_string(),
                c.n.to_string(),
                c.a.to_string(),
                c.alpha.to_string(),
                c.p_mode.to_string(),
                c.reps.to_string(),
                c.valid_reps.to_string(),
                c.failed_reps.to_string(),
                c.rejections.to_string(),
                c.rate.to_string(),
                c.mc_se.to_string(),
                c.mean_p.to_string(),
                c.mean_p_value.to_string(),
                c.invalid.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    /// Writes the JSON report to `path` and the CSV table beside it.
    pub fn write_files(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut json = BufWriter::new(File::create(path)?);
        self.write_json(&mut json)?;
        json.flush()?;
        self.write_csv(BufWriter::new(File::create(path.with_extension("csv"))?))?;
        Ok(())
    }
}

fn summarize(
    config: &ExperimentConfig,
    n: usize,
    a: f64,
    outcomes: &[Result<ReplicateOutcome>],
) -> Vec<CellResult> {
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter_map(|r| r.as_ref().ok()).collect();
    let valid = ok.len();
    let failed = outcomes.len() - valid;
    let invalid = failed as f64 > MAX_FAILURE_SHARE * outcomes.len() as f64;
    let mut cells = Vec::new();
    for &alpha in &config.alpha_list {
        for (k, &p_mode) in config.p_modes.iter().enumerate() {
            let rejections = ok.iter().filter(|o| o.p_values[k] < alpha).count();
            let (rate, mc_se, mean_p, mean_pv) = if valid == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let v = valid as f64;
                let rate = rejections as f64 / v;
                (
                    rate,
                    (rate * (1.0 - rate) / v).sqrt(),
                    ok.iter().map(|o| o.p_used[k] as f64).sum::<f64>() / v,
                    ok.iter().map(|o| o.p_values[k]).sum::<f64>() / v,
                )
            };
            cells.push(CellResult {
                n,
                a,
                alpha,
                p_mode,
                reps: outcomes.len(),
                valid_reps: valid,
                failed_reps: failed,
                rejections,
                rate,
                mc_se,
                mean_p,
                mean_p_value: mean_pv,
                invalid,
            });
        }
    }
    cells
}

/// Runs the full grid. Files are written when `output_path` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let mut cells = Vec::new();
    let a_values = config.a_values();
    let mut cell = 0;
    for &n in &config.n_list {
        for &a in &a_values {
            let outcomes = run_design_cell(config, cell, n, a);
            let rows = summarize(config, n, a, &outcomes);
            if let Some(r) = rows.iter().find(|r| r.invalid) {
                warn!("n = {n}, a = {a}: {} of {} replicates failed; cell marked invalid", r.failed_reps, r.reps);
            }
            info!(
                "n = {n}, a = {a}: rates {:?}",
                rows.iter().map(|r| r.rate).collect::<Vec<_>>()
            );
            cells.extend(rows);
            cell += 1;
        }
    }
    let report = ExperimentReport {
        config: config.clone(),
        cells,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        started_at,
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    if let Some(path) = &config.output_path {
        report.write_files(path)?;
    }
    Ok(report)
}
