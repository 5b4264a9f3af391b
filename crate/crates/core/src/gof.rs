//! Projection-averaged Cramér-von Mises statistic in U-statistic form.
//!
//! For unit directions `γ` uniform on the sphere,
//! `∫ I(γᵀU₁ ≤ 0) I(γᵀU₂ ≤ 0) dμ(γ) = 1/2 − Ang(U₁, U₂)/(2π)`, which turns the
//! integral over all projections of the score vectors into the angle kernel
//!
//! ```text
//! T_n = [n(n−1)(n−2)]⁻¹ Σ_{i≠j≠k} ê_i ê_j Ang(X̂_i − X̂_k, X̂_k − X̂_j).
//! ```
//!
//! The triple sum only depends on the residuals through `êᵀ K ê`, where
//! `K_ij = Σ_{k∉{i,j}} Ang(X̂_i − X̂_k, X̂_k − X̂_j)`. [`AngleKernel`] holds `K`
//! so that bootstrap replicates, which keep the scores fixed, cost `O(n²)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{GofError, Result};

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Angle between two nonzero vectors, in `[0, π]`.
pub fn angle(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(GofError::Dimension(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(GofError::DegeneratePair);
    }
    Ok(angle_between_unit_scaled(u, v, nu, nv))
}

/// `2·atan2(‖û − v̂‖, ‖û + v̂‖)`: the same angle as `arccos(ûᵀv̂)` but accurate
/// near 0 and π, where the arccosine loses half the significant digits.
#[inline]
fn angle_between_unit_scaled(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (x, y) = (a / nu, b / nv);
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// `1/2 − Ang(u, v)/(2π)`: the sphere measure of `{γ : γᵀu ≤ 0, γᵀv ≤ 0}`.
pub fn sphere_overlap_closed_form(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(0.5 - angle(u, v)? / (2.0 * PI))
}

/// Uniform direction on the unit sphere of `R^p`.
pub fn random_direction<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&g, &g).sqrt();
        if norm > 0.0 {
            return g.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Monte Carlo estimate of the sphere overlap and its standard error.
pub fn sphere_overlap_mc<R: Rng + ?Sized>(
    u: &[f64],
    v: &[f64],
    n_directions: usize,
    rng: &mut R,
) -> (f64, f64) {
    let hits = (0..n_directions)
        .filter(|_| {
            let g = random_direction(u.len(), rng);
            dot(&g, u) <= 0.0 && dot(&g, v) <= 0.0
        })
        .count();
    let m = n_directions as f64;
    let mean = hits as f64 / m;
    (mean, (mean * (1.0 - mean) / m).sqrt())
}

fn rows_of(scores: &DMatrix<f64>) -> Vec<Vec<f64>> {
    scores.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Pair kernel `K_ij = Σ_{k∉{i,j}} Ang(X̂_i − X̂_k, X̂_k − X̂_j)` for a fixed
/// score matrix. Triples with a zero difference vector contribute 0.
#[derive(Debug, Clone)]
pub struct AngleKernel {
    matrix: DMatrix<f64>,
    p: usize,
    degenerate_triples: usize,
}

impl AngleKernel {
    /// Builds the kernel in `O(n³p)`, parallel over rows. Each entry is summed
    /// sequentially over `k`, so the result does not depend on the thread count.
    pub fn new(scores: &DMatrix<f64>) -> Result<Self> {
        let n = scores.nrows();
        let p = scores.ncols();
        if n < 3 {
            return Err(GofError::InvalidSize { min: 3, got: n });
        }
        if p == 0 {
            return Err(GofError::Dimension("scores need at least one column".into()));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(GofError::InvalidArgument("scores must be finite".into()));
        }
        let rows = rows_of(scores);
        // dist[a][b] = ‖X̂_a − X̂_b‖
        let dist: Vec<Vec<f64>> = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                    .collect()
            })
            .collect();

        let upper: Vec<(Vec<f64>, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![0.0; n];
                let mut degenerate = 0;
                let mut d_ik = vec![0.0; p];
                let mut d_kj = vec![0.0; p];
                for j in i + 1..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        if k == i || k == j {
                            continue;
                        }
                        let (n1, n2) = (dist[i][k], dist[k][j]);
                        if n1 == 0.0 || n2 == 0.0 {
                            degenerate += 1;
                            continue;
                        }
                        for c in 0..p {
                            d_ik[c] = rows[i][c] - rows[k][c];
                            d_kj[c] = rows[k][c] - rows[j][c];
                        }
                        acc += angle_between_unit_scaled(&d_ik, &d_kj, n1, n2);
                    }
                    row[j] = acc;
                }
                (row, degenerate)
            })
            .collect();

        let mut matrix = DMatrix::zeros(n, n);
        let mut degenerate_triples = 0;
        for (i, (row, deg)) in upper.into_iter().enumerate() {
            degenerate_triples += 2 * deg;
            for j in i + 1..n {
                matrix[(i, j)] = row[j];
                matrix[(j, i)] = row[j];
            }
        }
        Ok(Self { matrix, p, degenerate_triples })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Ordered triples skipped because two score rows coincide.
    pub fn degenerate_triples(&self) -> usize {
        self.degenerate_triples
    }

    /// `T_n` for the given residuals.
    pub fn statistic(&self, residuals: &DVector<f64>) -> Result<f64> {
        let n = self.n();
        if residuals.len() != n {
            return Err(GofError::Dimension(format!(
                "{} residuals for a kernel of size {n}",
                residuals.len()
            )));
        }
        let mut total = 0.0;
        for i in 0..n {
            let mut inner = 0.0;
            for j in 0..n {
                inner += self.matrix[(i, j)] * residuals[j];
            }
            total += residuals[i] * inner;
        }
        let nf = n as f64;
        Ok(total / (nf * (nf - 1.0) * (nf - 2.0)))
    }
}

/// Observed statistic together with the inputs that produced it.
#[derive(Debug, Clone)]
pub struct GofStatistic {
    pub t_n: f64,
    pub n: usize,
    pub p: usize,
    pub residuals: DVector<f64>,
    pub scores: DMatrix<f64>,
}

impl GofStatistic {
    pub fn recompute(&self) -> Result<f64> {
        AngleKernel::new(&self.scores)?.statistic(&self.residuals)
    }
}

pub fn compute_tn(residuals: &DVector<f64>, scores: &DMatrix<f64>) -> Result<GofStatistic> {
    let n = scores.nrows();
    if n < 3 {
        return Err(GofError::InvalidSize { min: 3, got: n });
    }
    if residuals.len() != n {
        return Err(GofError::Dimension(format!("{} residuals for {n} score rows", residuals.len())));
    }
    if residuals.iter().any(|e| !e.is_finite()) {
        return Err(GofError::InvalidArgument("residuals must be finite".into()));
    }
    let kernel = AngleKernel::new(scores)?;
    let t_n = kernel.statistic(residuals)?;
    Ok(GofStatistic {
        t_n,
        n,
        p: scores.ncols(),
        residuals: residuals.clone(),
        scores: scores.clone(),
    })
}

/// Monte Carlo version of the projected Cramér-von Mises V-statistic
/// `n⁻³ Σ_{i,j,k} ê_i ê_j P_γ(γᵀX̂_i ≤ γᵀX̂_k, γᵀX̂_j ≤ γᵀX̂_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvmOracle {
    /// Full V-statistic over all `(i, j, k)`.
    pub total: f64,
    /// Contribution of triples with `i, j, k` pairwise distinct.
    pub distinct: f64,
    /// Remaining terms, where at least two indices coincide.
    pub diagonal: f64,
}

impl CvmOracle {
    /// The distinct-triple part rescaled to the U-statistic normalization and
    /// divided by the `1/(2π)` angle factor; estimates `T_n`.
    pub fn as_tn(&self, n: usize) -> f64 {
        let nf = n as f64;
        self.distinct * nf.powi(3) / (nf * (nf - 1.0) * (nf - 2.0)) * 2.0 * PI
    }
}

pub fn cvm_projection_oracle<R: Rng + ?Sized>(
    residuals: &DVector<f64>,
    scores: &DMatrix<f64>,
    n_directions: usize,
    rng: &mut R,
) -> Result<CvmOracle> {
    let n = scores.nrows();
    let p = scores.ncols();
    if residuals.len() != n {
        return Err(GofError::Dimension(format!("{} residuals for {n} score rows", residuals.len())));
    }
    if p == 0 || n_directions == 0 {
        return Err(GofError::InvalidArgument("need p ≥ 1 and at least one direction".into()));
    }
    let rows = rows_of(scores);
    let mut total = 0.0;
    let mut distinct = 0.0;
    let mut proj = vec![0.0; n];
    for _ in 0..n_directions {
        let g = random_direction(p, rng);
        for (pr, row) in proj.iter_mut().zip(&rows) {
            *pr = dot(&g, row);
        }
        for k in 0..n {
            // s_all = Σ_i e_i I_ik, the i = k term has I_kk = 1.
            let mut s_off = 0.0;
            let mut sq_off = 0.0;
            for i in 0..n {
                if i != k && proj[i] <= proj[k] {
                    s_off += residuals[i];
                    sq_off += residuals[i] * residuals[i];
                }
            }
            let s_all = s_off + residuals[k];
            total += s_all * s_all;
            distinct += s_off * s_off - sq_off;
        }
    }
    let scale = 1.0 / (n_directions as f64 * (n as f64).powi(3));
    let total = total * scale;
    let distinct = distinct * scale;
    Ok(CvmOracle { total, distinct, diagonal: total - distinct })
}

/// Largest `|n⁻¹ Σ ê_i I(γᵀX̂_i ≤ x)|` over random directions and all observed
/// thresholds `x = γᵀX̂_k`. Of order `n^{-1/2}` when the conditional mean
/// restriction holds.
pub fn conditional_moment_probe<R: Rng + ?Sized>(
    residuals: &DVector<f64>,
    scores: &DMatrix<f64>,
    n_directions: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = scores.nrows();
    if residuals.len() != n {
        return Err(GofError::Dimension(format!("{} residuals for {n} score rows", residuals.len())));
    }
    let rows = rows_of(scores);
    let mut best: f64 = 0.0;
    let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
    for _ in 0..n_directions {
        let g = random_direction(scores.ncols(), rng);
        order.clear();
        order.extend(rows.iter().zip(residuals.iter()).map(|(r, e)| (dot(&g, r), *e)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cum = 0.0;
        for (idx, &(x, e)) in order.iter().enumerate() {
            cum += e;
            // Ties: only evaluate after the last observation at this threshold.
            if idx + 1 < order.len() && order[idx + 1].0 == x {
                continue;
            }
            best = best.max(cum.abs());
        }
    }
    Ok(best / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct ordered-triple enumeration, independent of the kernel route.
    fn brute_force_tn(e: &[f64], x: &[Vec<f64>]) -> f64 {
        let n = e.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if i == j || j == k || i == k {
                        continue;
                    }
                    let u: Vec<f64> = x[i].iter().zip(&x[k]).map(|(a, b)| a - b).collect();
                    let v: Vec<f64> = x[k].iter().zip(&x[j]).map(|(a, b)| a - b).collect();
                    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if nu > 0.0 && nv > 0.0 {
                        let c = u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv);
                        s += e[i] * e[j] * c.clamp(-1.0, 1.0).acos();
                    }
                }
            }
        }
        s / (n * (n - 1) * (n - 2)) as f64
    }

    fn random_instance(n: usize, p: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, DMatrix<f64>) {
        let e = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
        (e, x)
    }

    #[test]
    fn angle_examples() {
        assert_abs_diff_eq!(angle(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(angle(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(angle(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), PI, epsilon = 1e-15);
        assert!(matches!(angle(&[0.0, 0.0], &[1.0, 0.0]), Err(GofError::DegeneratePair)));
        assert!(matches!(angle(&[1.0], &[1.0, 0.0]), Err(GofError::Dimension(_))));
        let u = [0.1, 0.2, 0.3];
        let v = [0.3, 0.6, 0.9];
        assert!(angle(&u, &v).unwrap().abs() < 1e-15);
        let w = [-0.3, -0.6, -0.9];
        assert_abs_diff_eq!(angle(&u, &w).unwrap(), PI, epsilon = 1e-15);
        let a = angle(&[1.0, 1e-9], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(a, 1e-9, epsilon = 1e-20);
    }

    #[test]
    fn overlap_examples() {
        assert_abs_diff_eq!(sphere_overlap_closed_form(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert_abs_diff_eq!(sphere_overlap_closed_form(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), 0.0, epsilon = 1e-15);
        let cf = sphere_overlap_closed_form(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(cf, 0.25, epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mc, _) = sphere_overlap_mc(&[1.0, 0.0], &[0.0, 1.0], 100_000, &mut rng);
        assert_abs_diff_eq!(mc, 0.25, epsilon = 5e-3);
    }

    #[test]
    fn hand_computed_three_point_case() {
        let e = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let st = compute_tn(&e, &x).unwrap();
        assert_abs_diff_eq!(st.t_n, 2.0 * PI / 3.0, epsilon = 1e-12);
        assert_eq!(st.recompute().unwrap(), st.t_n);
    }

    #[test]
    fn zero_residuals_and_small_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, x) = random_instance(6, 2, &mut rng);
        assert_eq!(compute_tn(&DVector::zeros(6), &x).unwrap().t_n, 0.0);
        let x2 = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            compute_tn(&DVector::zeros(2), &x2),
            Err(GofError::InvalidSize { .. })
        ));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 3..=8 {
            for p in [1, 2, 4] {
                let (e, x) = random_instance(n, p, &mut rng);
                let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
                let bf = brute_force_tn(e.as_slice(), &rows);
                let tn = compute_tn(&e, &x).unwrap().t_n;
                assert!((tn - bf).abs() <= 1e-12, "n={n} p={p}: {tn} vs {bf}");
            }
        }
    }

    #[test]
    fn tied_rows_contribute_zero() {
        let e = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.3]);
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, -2.0, 0.5]);
        let k = AngleKernel::new(&x).unwrap();
        assert!(k.degenerate_triples() > 0);
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
        let bf = brute_force_tn(e.as_slice(), &rows);
        // Tied rows make u and v exactly antiparallel, where the oracle's arccos
        // carries ~1e-8 rounding error.
        assert_abs_diff_eq!(k.statistic(&e).unwrap(), bf, epsilon = 1e-7);
    }

    #[test]
    fn reflection_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let u = random_direction(5, &mut rng);
            let v: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            let a = angle(&u, &v).unwrap();
            assert_abs_diff_eq!(angle(&u, &neg).unwrap(), PI - a, epsilon = 1e-12);
            assert_eq!(angle(&v, &u).unwrap(), a);
            let scaled: Vec<f64> = u.iter().map(|x| 3.7 * x).collect();
            assert_abs_diff_eq!(angle(&scaled, &v).unwrap(), a, epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_matches_statistic_up_to_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let (e, x) = random_instance(n, 3, &mut rng);
        let tn = compute_tn(&e, &x).unwrap().t_n;
        let oracle = cvm_projection_oracle(&e, &x, 100_000, &mut rng).unwrap();
        // i = j ≠ k terms average 1/2, k ∈ {i, j} terms average 1/2 (or 1 when i = j = k).
        let sq: f64 = e.iter().map(|v| v * v).sum();
        let s: f64 = e.sum();
        let nf = n as f64;
        let diag_expected = (0.5 * (nf - 1.0) * sq + sq + (s * s - sq)) / nf.powi(3);
        assert!((oracle.diagonal - diag_expected).abs() < 0.02 * diag_expected.abs().max(0.1));
        assert!((oracle.as_tn(n) - tn).abs() < 0.02 * tn.abs().max(0.1), "{} vs {tn}", oracle.as_tn(n));
        assert_abs_diff_eq!(oracle.total, oracle.distinct + oracle.diagonal, epsilon = 1e-12);

        let zero = cvm_projection_oracle(&DVector::zeros(n), &x, 100, &mut rng).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn probe_zero_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, x) = random_instance(20, 3, &mut rng);
        assert_eq!(conditional_moment_probe(&DVector::zeros(20), &x, 50, &mut rng).unwrap(), 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn invariances(seed in 0u64..10_000, n in 3usize..12, p in 1usize..5, c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (e, x) = random_instance(n, p, &mut rng);
            let base = compute_tn(&e, &x).unwrap().t_n;

            let shift: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let shifted = DMatrix::from_fn(n, p, |i, j| x[(i, j)] + shift[j]);
            proptest::prop_assert!((compute_tn(&e, &shifted).unwrap().t_n - base).abs() <= 1e-10);

            let scaled = &e * c;
            let ts = compute_tn(&scaled, &x).unwrap().t_n;
            proptest::prop_assert!((ts - c * c * base).abs() <= 1e-10 * (1.0 + base.abs()));

            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let ep = DVector::from_fn(n, |i, _| e[perm[i]]);
            let xp = DMatrix::from_fn(n, p, |i, j| x[(perm[i], j)]);
            proptest::prop_assert!((compute_tn(&ep, &xp).unwrap().t_n - base).abs() <= 1e-10);

            let q = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng)).qr().q();
            let rotated = &x * q;
            proptest::prop_assert!((compute_tn(&e, &rotated).unwrap().t_n - base).abs() <= 1e-10);
        }
    }
}
