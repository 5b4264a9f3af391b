//! Functional principal components of a sample of curves.
//!
//! The covariance operator is discretized with the grid quadrature weights `W`.
//! Its nonzero spectrum is read off the `n × n` dual matrix
//! `Xc W Xcᵀ / n`, which shares eigenvalues with `W^{1/2} Ĉ W^{1/2}`; grid
//! eigenfunctions are then back-transformed so they are orthonormal under
//! the quadrature inner product.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GofError, Result};
use crate::funcdata::{FunctionalSample, Grid};

/// Relative eigenvalue level below which a component is treated as null.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FpcaBasis {
    grid: Grid,
    mean: Vec<f64>,
    /// `p × T`, row ν is `ψ̂_ν` on the grid.
    eigenfunctions: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
    /// `n × p`, row i is `(⟨X_i − X̄, ψ̂_ν⟩)_ν`.
    scores: DMatrix<f64>,
    total_variance: f64,
    rank: usize,
}

impl FpcaBasis {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn explained_variance_ratio(&self) -> &[f64] {
        &self.explained_variance_ratio
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    /// Sum of all eigenvalues of the sample covariance operator.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Numerical rank of the centered sample.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Leading `p` columns of the score matrix.
    pub fn scores_truncated(&self, p: usize) -> Result<DMatrix<f64>> {
        if p == 0 || p > self.n_components() {
            return Err(GofError::Dimension(format!(
                "requested {p} components, basis has {}",
                self.n_components()
            )));
        }
        Ok(self.scores.columns(0, p).into_owned())
    }

    /// Smallest `p` whose cumulative explained variance reaches `threshold`.
    pub fn select_p(&self, threshold: f64) -> Result<usize> {
        select_p_from_ratios(&self.explained_variance_ratio, self.total_variance, threshold)
    }

    /// Dumps eigenvalues and eigenfunctions: header row is `eigenvalue,<grid...>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        let mut header = vec!["eigenvalue".to_string()];
        header.extend(self.grid.points().iter().map(|t| format!("{t:?}")));
        w.write_record(&header)?;
        for (nu, row) in self.eigenfunctions.row_iter().enumerate() {
            let mut rec = vec![format!("{:?}", self.eigenvalues[nu])];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Eigen-decomposition of the centered sample covariance operator, keeping the
/// leading `p_max` components.
pub fn fit_fpca(sample: &FunctionalSample, p_max: usize) -> Result<FpcaBasis> {
    let n = sample.n();
    let grid = sample.grid();
    let t = grid.len();
    if n < 2 {
        return Err(GofError::InvalidSize { min: 2, got: n });
    }
    let limit = (n - 1).min(t);
    if p_max == 0 || p_max > limit {
        return Err(GofError::Dimension(format!(
            "p_max must be in 1..={limit} for n = {n}, T = {t}; got {p_max}"
        )));
    }

    let x = sample.values();
    let mean: Vec<f64> = (0..t).map(|c| x.column(c).mean()).collect();
    let mut xc = x.clone();
    for (c, m) in mean.iter().enumerate() {
        xc.column_mut(c).add_scalar_mut(-m);
    }

    let w = DVector::from_column_slice(grid.weights());
    let mut xw = xc.clone();
    for (c, wc) in w.iter().enumerate() {
        xw.column_mut(c).scale_mut(*wc);
    }
    // Xc W Xcᵀ, symmetrized against rounding.
    let mut gram = &xw * xc.transpose();
    gram = (&gram + gram.transpose()) * 0.5;
    let dual = &gram / n as f64;

    let eig = SymmetricEigen::new(dual);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut all_values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    // Scale by the raw curve energy so that identical curves have rank 0.
    let raw_energy = x
        .row_iter()
        .map(|r| r.iter().zip(grid.weights()).map(|(v, w)| w * v * v).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let scale = all_values[0].max(raw_energy);
    let rank = if scale > 0.0 {
        all_values.iter().filter(|&&v| v > RANK_TOL * scale).count()
    } else {
        0
    };
    all_values[rank..].iter_mut().for_each(|v| *v = 0.0);
    let total_variance: f64 = all_values.iter().sum();
    if rank < p_max {
        warn!("sample covariance has rank {rank} < p_max = {p_max}; trailing eigenvalues set to 0");
    }

    let mut eigenfunctions = DMatrix::<f64>::zeros(p_max, t);
    let mut eigenvalues = vec![0.0; p_max];
    for nu in 0..rank.min(p_max) {
        let lambda = all_values[nu];
        let u = eig.eigenvectors.column(order[nu]);
        let psi = xc.transpose() * u / (n as f64 * lambda).sqrt();
        eigenfunctions.row_mut(nu).copy_from(&psi.transpose());
        eigenvalues[nu] = lambda;
    }
    // Null directions: orthonormal completion so the basis stays well defined.
    if rank < p_max {
        complete_basis(&mut eigenfunctions, rank.min(p_max), grid);
    }
    for nu in 0..p_max {
        fix_sign(&mut eigenfunctions, nu);
    }

    // Scores by quadrature: Xc W Ψᵀ.
    let scores = &xw * eigenfunctions.transpose();

    let explained_variance_ratio = if total_variance > 0.0 {
        eigenvalues.iter().map(|v| v / total_variance).collect()
    } else {
        vec![0.0; p_max]
    };

    Ok(FpcaBasis {
        grid: grid.clone(),
        mean,
        eigenfunctions,
        eigenvalues,
        explained_variance_ratio,
        scores,
        total_variance,
        rank,
    })
}

/// Fits with the largest admissible number of components.
pub fn fit_fpca_full(sample: &FunctionalSample) -> Result<FpcaBasis> {
    let limit = sample.n().saturating_sub(1).min(sample.grid().len());
    fit_fpca(sample, limit)
}

/// Smallest `p` with cumulative explained-variance ratio ≥ `threshold`,
/// from a full list of eigenvalues.
pub fn select_p_from_eigenvalues(eigenvalues: &[f64], threshold: f64) -> Result<usize> {
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let ratios: Vec<f64> = if total > 0.0 {
        eigenvalues.iter().map(|v| v.max(0.0) / total).collect()
    } else {
        vec![0.0; eigenvalues.len()]
    };
    select_p_from_ratios(&ratios, total, threshold)
}

fn select_p_from_ratios(ratios: &[f64], total: f64, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(GofError::InvalidArgument(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    if !(total > 0.0) {
        return Err(GofError::DegenerateSample("all eigenvalues are zero".into()));
    }
    let mut cum = 0.0;
    for (k, r) in ratios.iter().enumerate() {
        cum += r;
        // Absorb summation rounding, e.g. 0.5 + 0.3 + 0.15.
        if cum >= threshold - 1e-12 {
            return Ok(k + 1);
        }
    }
    Ok(ratios.len())
}

fn fix_sign(m: &mut DMatrix<f64>, row: usize) {
    let r = m.row(row);
    let (mut best, mut best_abs) = (0.0, -1.0);
    for &v in r.iter() {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = v;
        }
    }
    if best < 0.0 {
        m.row_mut(row).neg_mut();
    }
}

/// Fills rows `from..` with functions orthonormal (under the grid quadrature)
/// to every earlier row, by Gram-Schmidt on cosine seeds.
fn complete_basis(m: &mut DMatrix<f64>, from: usize, grid: &Grid) {
    let w = grid.weights();
    let ip = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((x, y), w)| w * x * y).sum() };
    let rows = m.nrows();
    let t = grid.len();
    let mut seed_k = 0usize;
    let mut row = from;
    while row < rows && seed_k < 4 * t {
        let mut cand: Vec<f64> = grid
            .points()
            .iter()
            .map(|&s| (seed_k as f64 * std::f64::consts::PI * s).cos())
            .collect();
        seed_k += 1;
        for _ in 0..2 {
            for prev in 0..row {
                let pr: Vec<f64> = m.row(prev).iter().copied().collect();
                let c = ip(&cand, &pr);
                cand.iter_mut().zip(&pr).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = ip(&cand, &cand).sqrt();
        if norm > 1e-6 {
            for (k, v) in cand.iter().enumerate() {
                m[(row, k)] = v / norm;
            }
            row += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::gen_example1;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram_under_quadrature(b: &FpcaBasis) -> DMatrix<f64> {
        let p = b.n_components();
        DMatrix::from_fn(p, p, |a, c| {
            let fa: Vec<f64> = b.eigenfunctions().row(a).iter().copied().collect();
            let fc: Vec<f64> = b.eigenfunctions().row(c).iter().copied().collect();
            b.grid().inner_product(&fa, &fc).unwrap()
        })
    }

    #[test]
    fn eigenfunctions_orthonormal_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = gen_example1(60, 0.0, &mut rng).unwrap();
        let b = fit_fpca(&d.sample, 20).unwrap();
        let g = gram_under_quadrature(&b);
        for a in 0..20 {
            for c in 0..20 {
                let target = if a == c { 1.0 } else { 0.0 };
                assert!((g[(a, c)] - target).abs() <= 1e-8, "({a},{c}) = {}", g[(a, c)]);
            }
        }
        assert!(b.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        assert!(b.eigenvalues().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn leading_eigenvalues_match_population() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1000;
        let d = gen_example1(n, 0.0, &mut rng).unwrap();
        let b = fit_fpca(&d.sample, 3).unwrap();
        // Sample eigenvalue SE ≈ κ√(2/n).
        let se = (2.0 / n as f64).sqrt();
        let k1 = 1.0;
        let k2 = 2f64.powf(-1.7);
        assert!((b.eigenvalues()[0] - k1).abs() < 4.0 * k1 * se, "{}", b.eigenvalues()[0]);
        assert!((b.eigenvalues()[1] - k2).abs() < 4.0 * k2 * se, "{}", b.eigenvalues()[1]);
    }

    #[test]
    fn rank_one_pair() {
        let grid = Grid::uniform(50).unwrap();
        let f = grid.evaluate(|t| (3.0 * t).sin() + t);
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        let x = DMatrix::from_row_iterator(2, 50, f.iter().chain(neg.iter()).copied());
        let s = FunctionalSample::new(grid.clone(), x).unwrap();
        let b = fit_fpca(&s, 1).unwrap();
        assert_eq!(b.rank(), 1);
        let nf = grid.inner_product(&f, &f).unwrap().sqrt();
        let psi: Vec<f64> = b.eigenfunctions().row(0).iter().copied().collect();
        let cos = grid.inner_product(&psi, &f).unwrap() / nf;
        assert_abs_diff_eq!(cos.abs(), 1.0, epsilon = 1e-10);
        // Eigenvalue is n⁻¹Σ‖X_i‖² = ‖f‖².
        assert_abs_diff_eq!(b.eigenvalues()[0], nf * nf, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_sample_zero_eigenvalues() {
        let grid = Grid::uniform(20).unwrap();
        let f = grid.evaluate(|t| t * t);
        let x = DMatrix::from_fn(5, 20, |_, c| f[c]);
        let s = FunctionalSample::new(grid, x).unwrap();
        let b = fit_fpca(&s, 3).unwrap();
        assert_eq!(b.rank(), 0);
        assert!(b.eigenvalues().iter().all(|&v| v == 0.0));
        assert!(matches!(b.select_p(0.95), Err(GofError::DegenerateSample(_))));
        let g = gram_under_quadrature(&b);
        assert!((g - DMatrix::identity(3, 3)).abs().max() < 1e-8);
    }

    #[test]
    fn common_shift_leaves_basis_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = gen_example1(30, 0.0, &mut rng).unwrap();
        let b1 = fit_fpca(&d.sample, 5).unwrap();
        let shift = d.sample.grid().evaluate(|t| 2.0 + t.sin());
        let mut x = d.sample.values().clone();
        for mut row in x.row_iter_mut() {
            for (v, s) in row.iter_mut().zip(&shift) {
                *v += s;
            }
        }
        let s2 = FunctionalSample::new(d.sample.grid().clone(), x).unwrap();
        let b2 = fit_fpca(&s2, 5).unwrap();
        assert!((b1.eigenfunctions() - b2.eigenfunctions()).abs().max() < 1e-8);
        assert!((b1.scores() - b2.scores()).abs().max() < 1e-8);
    }

    #[test]
    fn reconstruction_and_score_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 25;
        let d = gen_example1(n, 0.0, &mut rng).unwrap();
        let b = fit_fpca_full(&d.sample).unwrap();
        assert_eq!(b.rank(), n - 1);
        let recon = b.scores() * b.eigenfunctions();
        for i in 0..n {
            let diff: Vec<f64> = (0..d.sample.grid().len())
                .map(|c| d.sample.values()[(i, c)] - b.mean()[c] - recon[(i, c)])
                .collect();
            let err = d.sample.grid().inner_product(&diff, &diff).unwrap().sqrt();
            assert!(err < 1e-6, "curve {i} reconstruction error {err}");
        }
        let s = b.scores();
        let cov = s.transpose() * s / n as f64;
        for a in 0..n - 1 {
            for c in 0..n - 1 {
                if a == c {
                    assert_abs_diff_eq!(cov[(a, a)], b.eigenvalues()[a], epsilon = 1e-8);
                } else {
                    assert!(cov[(a, c)].abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn p_max_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = gen_example1(10, 0.0, &mut rng).unwrap();
        assert!(matches!(fit_fpca(&d.sample, 10), Err(GofError::Dimension(_))));
        assert!(matches!(fit_fpca(&d.sample, 0), Err(GofError::Dimension(_))));
    }

    #[test]
    fn select_p_examples() {
        assert_eq!(select_p_from_eigenvalues(&[0.95, 0.05], 0.95).unwrap(), 1);
        assert_eq!(select_p_from_eigenvalues(&[0.5, 0.3, 0.15, 0.05], 0.95).unwrap(), 3);
        assert_eq!(select_p_from_eigenvalues(&[0.5, 0.3, 0.15, 0.05], 1.0).unwrap(), 4);
        assert!(select_p_from_eigenvalues(&[0.0, 0.0], 0.95).is_err());
        assert!(select_p_from_eigenvalues(&[1.0], 0.0).is_err());
        assert!(select_p_from_eigenvalues(&[1.0], 1.5).is_err());
    }

    #[test]
    fn select_p_population_example1() {
        // Population ratios of κ_j = j^-1.7 truncated at 100 terms.
        let kappa: Vec<f64> = (1..=100).map(|j| (j as f64).powf(-1.7)).collect();
        let p_pop = select_p_from_eigenvalues(&kappa, 0.95).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = gen_example1(100, 0.0, &mut rng).unwrap();
        let b = fit_fpca_full(&d.sample).unwrap();
        let p = b.select_p(0.95).unwrap();
        // κ_j = j^-1.7 decays slowly enough that 95% needs ~24 population terms.
        assert_eq!(p_pop, 24);
        assert!(p.abs_diff(p_pop) <= 8, "p = {p}, population p = {p_pop}");
    }

    proptest::proptest! {
        #[test]
        fn select_p_monotone(vals in proptest::collection::vec(0.0f64..10.0, 1..12),
                             t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            proptest::prop_assume!(vals.iter().sum::<f64>() > 0.0);
            let mut v = vals.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let p_lo = select_p_from_eigenvalues(&v, lo).unwrap();
            let p_hi = select_p_from_eigenvalues(&v, hi).unwrap();
            proptest::prop_assert!(p_lo <= p_hi);
        }
    }
}
