//! Coordinate-descent LASSO in covariance form:
//! `min_β ½ βᵀΣ̂β − cᵀβ + λ‖β‖₁`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CombinedCovariance, PSD_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Largest coefficient change tolerated in a converged sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    pub active_set: bool,
    /// Accept covariances with negative eigenvalues.
    pub allow_indefinite: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_sweeps: 10_000,
            active_set: true,
            allow_indefinite: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_sweeps == 0 {
            return Err(Error::InvalidArgument(
                "solver needs tol > 0 and max_sweeps ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub kkt: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Decreasing, log-spaced penalty levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    pub values: Vec<f64>,
    pub ratio: f64,
}

/// `n_points` values from `max_j |c_j|` down to `ratio·max_j |c_j|`.
pub fn lambda_path(c: &[f64], n_points: usize, ratio: f64) -> Result<LambdaGrid> {
    if n_points < 2 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda grid needs ≥ 2 points and ratio in (0, 1), got {n_points}, {ratio}"
        )));
    }
    let lmax = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if lmax == 0.0 {
        return Err(Error::AllZeroCovariance);
    }
    let step = ratio.ln() / (n_points - 1) as f64;
    let mut values: Vec<f64> = (0..n_points)
        .map(|i| lmax * (step * i as f64).exp())
        .collect();
    values[0] = lmax;
    values[n_points - 1] = lmax * ratio;
    Ok(LambdaGrid { values, ratio })
}

pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// `½ βᵀΣ̂β − cᵀβ + λ‖β‖₁`.
pub fn objective(sigma: &DMatrix<f64>, c: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let b = DVector::from_column_slice(beta);
    let quad = b.dot(&(sigma * &b));
    let lin: f64 = c.iter().zip(beta).map(|(c, b)| c * b).sum();
    let l1: f64 = beta.iter().map(|v| v.abs()).sum();
    0.5 * quad - lin + lambda * l1
}

/// Max-norm violation of the stationarity conditions with `g = Σ̂β − c`:
/// `|g_j + λ·sign β_j|` on the support and `(|g_j| − λ)₊` off it.
pub fn kkt_residual(sigma: &DMatrix<f64>, c: &[f64], beta: &[f64], lambda: f64) -> f64 {
    kkt_masked(sigma, c, beta, lambda, None)
}

fn kkt_masked(
    sigma: &DMatrix<f64>,
    c: &[f64],
    beta: &[f64],
    lambda: f64,
    pinned: Option<&[bool]>,
) -> f64 {
    let b = DVector::from_column_slice(beta);
    let g = sigma * &b;
    let mut worst = 0.0_f64;
    for j in 0..beta.len() {
        if pinned.is_some_and(|m| m[j]) {
            continue;
        }
        let gj = g[j] - c[j];
        let v = if beta[j] == 0.0 {
            (gj.abs() - lambda).max(0.0)
        } else {
            (gj + lambda * beta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// A covariance-form LASSO problem. Pinned coordinates stay at zero.
#[derive(Debug, Clone)]
pub struct LassoProblem<'a> {
    pub sigma: &'a DMatrix<f64>,
    pub c: &'a [f64],
    pub pinned: Vec<bool>,
}

impl<'a> LassoProblem<'a> {
    pub fn new(sigma: &'a DMatrix<f64>, c: &'a [f64], pinned: Vec<bool>) -> Result<Self> {
        let p = c.len();
        if sigma.shape() != (p, p) || pinned.len() != p {
            return Err(Error::Shape(format!(
                "covariance {:?}, vector {p}, pin mask {}",
                sigma.shape(),
                pinned.len()
            )));
        }
        for j in 0..p {
            if !pinned[j] && !(sigma[(j, j)] > 0.0) {
                return Err(Error::ZeroDiagonal(j));
            }
        }
        Ok(Self { sigma, c, pinned })
    }

    /// Checks the covariance for positive semi-definiteness unless
    /// `opts.allow_indefinite` is set.
    pub fn from_combined(
        cov: &'a CombinedCovariance,
        c: &'a [f64],
        pinned: Vec<bool>,
        opts: &SolverOptions,
    ) -> Result<Self> {
        if !opts.allow_indefinite {
            let lam = cov.min_eig()?;
            if lam < -PSD_TOL {
                return Err(Error::Indefinite(lam));
            }
        }
        Self::new(&cov.matrix, c, pinned)
    }

    pub fn p(&self) -> usize {
        self.c.len()
    }

    pub fn kkt(&self, beta: &[f64], lambda: f64) -> f64 {
        kkt_masked(self.sigma, self.c, beta, lambda, Some(&self.pinned))
    }

    pub fn solve(&self, lambda: f64, warm: Option<&[f64]>, opts: &SolverOptions) -> Result<FitResult> {
        self.solve_inner(lambda, warm, opts, None)
    }

    /// As [`solve`](Self::solve), also returning the objective after every sweep.
    pub fn solve_traced(
        &self,
        lambda: f64,
        warm: Option<&[f64]>,
        opts: &SolverOptions,
    ) -> Result<(FitResult, Vec<f64>)> {
        let mut trace = Vec::new();
        let fit = self.solve_inner(lambda, warm, opts, Some(&mut trace))?;
        Ok((fit, trace))
    }

    fn solve_inner(
        &self,
        lambda: f64,
        warm: Option<&[f64]>,
        opts: &SolverOptions,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<FitResult> {
        opts.validate()?;
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be ≥ 0, got {lambda}")));
        }
        let p = self.p();
        let sigma = self.sigma;
        let mut beta = match warm {
            Some(w) if w.len() == p => w.to_vec(),
            Some(w) => {
                return Err(Error::Shape(format!("warm start has {} entries, need {p}", w.len())))
            }
            None => vec![0.0; p],
        };
        for j in 0..p {
            if self.pinned[j] {
                beta[j] = 0.0;
            }
        }
        // r = Σ̂β, maintained incrementally.
        let mut r = vec![0.0; p];
        // column-major storage: column t is a contiguous slice
        let data = sigma.as_slice();
        let column = |t: usize| &data[t * p..(t + 1) * p];
        let refresh = |beta: &[f64], r: &mut [f64]| {
            r.fill(0.0);
            for (t, &b) in beta.iter().enumerate() {
                if b != 0.0 {
                    for (ri, s) in r.iter_mut().zip(column(t)) {
                        *ri += s * b;
                    }
                }
            }
        };
        refresh(&beta, &mut r);

        let update = |j: usize, beta: &mut [f64], r: &mut [f64]| -> f64 {
            let sjj = sigma[(j, j)];
            let old = beta[j];
            let z = self.c[j] - (r[j] - sjj * old);
            let new = soft_threshold(z, lambda) / sjj;
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                for (ri, s) in r.iter_mut().zip(column(j)) {
                    *ri += s * delta;
                }
            }
            delta.abs()
        };

        let free: Vec<usize> = (0..p).filter(|&j| !self.pinned[j]).collect();
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < opts.max_sweeps {
            let mut change = 0.0_f64;
            for &j in &free {
                change = change.max(update(j, &mut beta, &mut r));
            }
            sweeps += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.push(objective(sigma, self.c, &beta, lambda));
            }
            if change <= opts.tol {
                refresh(&beta, &mut r);
                if self.kkt(&beta, lambda) <= 10.0 * opts.tol {
                    converged = true;
                    break;
                }
                continue;
            }
            if opts.active_set {
                let active: Vec<usize> = free.iter().copied().filter(|&j| beta[j] != 0.0).collect();
                while sweeps < opts.max_sweeps {
                    let mut change = 0.0_f64;
                    for &j in &active {
                        change = change.max(update(j, &mut beta, &mut r));
                    }
                    sweeps += 1;
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(objective(sigma, self.c, &beta, lambda));
                    }
                    if change <= opts.tol {
                        break;
                    }
                }
            }
        }
        if !converged {
            log::warn!("coordinate descent stopped after {sweeps} sweeps at lambda = {lambda:.3e}");
        }
        let kkt = self.kkt(&beta, lambda);
        Ok(FitResult {
            lambda,
            beta,
            kkt,
            sweeps,
            converged,
        })
    }

    /// Solves a decreasing grid with warm starts, in grid order.
    pub fn path(&self, grid: &LambdaGrid, opts: &SolverOptions) -> Result<Vec<FitResult>> {
        let mut out: Vec<FitResult> = Vec::with_capacity(grid.values.len());
        for (index, &lambda) in grid.values.iter().enumerate() {
            let warm = out.last().map(|f| f.beta.as_slice());
            let fit = self
                .solve(lambda, warm, opts)
                .map_err(|e| Error::Path {
                    index,
                    source: Box::new(e),
                })?;
            out.push(fit);
        }
        Ok(out)
    }
}

/// Single-`λ` solve on a fused covariance.
pub fn cd_lasso(
    sigma_hat: &CombinedCovariance,
    c: &[f64],
    lambda: f64,
    warm: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<FitResult> {
    let pinned = vec![false; c.len()];
    LassoProblem::from_combined(sigma_hat, c, pinned, opts)?.solve(lambda, warm, opts)
}

pub fn fit_path(
    sigma_hat: &CombinedCovariance,
    c: &[f64],
    grid: &LambdaGrid,
    opts: &SolverOptions,
) -> Result<Vec<FitResult>> {
    let pinned = vec![false; c.len()];
    LassoProblem::from_combined(sigma_hat, c, pinned, opts)?.path(grid, opts)
}

/// `ŷ = Xβ`.
pub fn predict(x: &DMatrix<f64>, beta: &[f64]) -> Result<DVector<f64>> {
    if x.ncols() != beta.len() {
        return Err(Error::Shape(format!(
            "{} columns but {} coefficients",
            x.ncols(),
            beta.len()
        )));
    }
    Ok(x * DVector::from_column_slice(beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Provenance;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cov(m: DMatrix<f64>) -> CombinedCovariance {
        CombinedCovariance::new(m, Provenance::Direct)
    }

    fn random_psd(rng: &mut ChaCha8Rng, p: usize, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
        a.tr_mul(&a) / n as f64
    }

    #[test]
    fn lambda_path_endpoints_and_spacing() {
        let g = lambda_path(&[0.5, -2.0], 2, 1e-2).unwrap();
        assert_eq!(g.values, vec![2.0, 0.02]);
        let g = lambda_path(&[1.0, 3.0], 30, 1e-2).unwrap();
        assert_eq!(g.values.len(), 30);
        assert_abs_diff_eq!(g.values[0] / g.values[29], 100.0, epsilon = 1e-9);
        let r0 = g.values[1] / g.values[0];
        for w in g.values.windows(2) {
            assert_abs_diff_eq!(w[1] / w[0], r0, epsilon = 1e-12);
        }
        assert!(matches!(lambda_path(&[0.0, 0.0], 5, 0.1), Err(Error::AllZeroCovariance)));
    }

    #[test]
    fn large_lambda_gives_exact_zero() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let fit = cd_lasso(&cov(s), &[0.4, -0.7], 0.7, None, &SolverOptions::default()).unwrap();
        assert_eq!(fit.beta, vec![0.0, 0.0]);
        assert!(fit.converged);
        assert_eq!(fit.kkt, 0.0);
    }

    #[test]
    fn identity_covariance_is_soft_threshold() {
        let fit = cd_lasso(
            &cov(DMatrix::identity(2, 2)),
            &[1.0, 0.2],
            0.5,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(fit.beta, vec![0.5, 0.0]);
    }

    #[test]
    fn symmetric_two_by_two_solution() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let c = [1.0, 1.0];
        let fit = cd_lasso(&cov(s.clone()), &c, 0.25, None, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.beta[1], 0.5, epsilon = 1e-6);
        assert!(kkt_residual(&s, &c, &[0.5, 0.5], 0.25) <= 1e-9);
        assert!(kkt_residual(&s, &c, &[0.6, 0.5], 0.25) > 0.0);
        assert_eq!(kkt_residual(&s, &c, &[0.0, 0.0], 1.0), 0.0);

        // dense grid search over the objective
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=200 {
            for k in 0..=200 {
                let (a, b) = (i as f64 / 200.0, k as f64 / 200.0);
                let f = objective(&s, &c, &[a, b], 0.25);
                if f < best.0 {
                    best = (f, a, b);
                }
            }
        }
        assert_abs_diff_eq!(best.1, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(best.2, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn zero_diagonal_is_rejected_unless_pinned() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let c = [1.0, 0.0];
        assert!(matches!(
            LassoProblem::new(&s, &c, vec![false, false]),
            Err(Error::ZeroDiagonal(1))
        ));
        let prob = LassoProblem::new(&s, &c, vec![false, true]).unwrap();
        let fit = prob.solve(0.1, None, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 0.9, epsilon = 1e-12);
        assert_eq!(fit.beta[1], 0.0);
    }

    #[test]
    fn indefinite_input_needs_opt_in() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 1.0]);
        let opts = SolverOptions::default();
        assert!(matches!(
            cd_lasso(&cov(s.clone()), &[1.0, 0.0], 0.5, None, &opts),
            Err(Error::Indefinite(_))
        ));
        let loose = SolverOptions {
            allow_indefinite: true,
            max_sweeps: 50,
            ..opts
        };
        let fit = cd_lasso(&cov(s), &[1.0, 0.0], 0.1, None, &loose).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.sweeps, 50);
    }

    #[test]
    fn path_is_certified_and_warm_equals_cold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_psd(&mut rng, 8, 20);
        let c: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let opts = SolverOptions::default();
        let grid = lambda_path(&c, 15, 1e-2).unwrap();
        let path = fit_path(&cov(s.clone()), &c, &grid, &opts).unwrap();
        assert_eq!(path.len(), 15);
        for (fit, &lam) in path.iter().zip(&grid.values) {
            assert_eq!(fit.lambda, lam);
            assert!(fit.converged);
            assert!(fit.kkt <= 1e-6);
            let cold = cd_lasso(&cov(s.clone()), &c, lam, None, &opts).unwrap();
            for (a, b) in fit.beta.iter().zip(&cold.beta) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
        let single = LambdaGrid {
            values: vec![grid.values[0]],
            ratio: 1e-2,
        };
        let fit = &fit_path(&cov(s), &c, &single, &opts).unwrap()[0];
        assert!(fit.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn predict_examples() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        assert_eq!(predict(&x, &[0.0, 0.0]).unwrap().as_slice(), &[0.0; 3]);
        assert_eq!(predict(&x, &[2.0, -1.0]).unwrap().as_slice(), &[0.0, -2.5, -3.0]);
        let eye = DMatrix::identity(2, 2);
        assert_eq!(predict(&eye, &[0.3, 0.7]).unwrap().as_slice(), &[0.3, 0.7]);
        assert!(predict(&x, &[1.0]).is_err());
    }

    /// ISTA with a step of one over the largest eigenvalue.
    fn proximal_gradient(s: &DMatrix<f64>, c: &[f64], lambda: f64) -> Vec<f64> {
        let l = nalgebra::SymmetricEigen::new(s.clone()).eigenvalues.max().max(1e-12);
        let mut b = DVector::zeros(c.len());
        let cv = DVector::from_column_slice(c);
        for _ in 0..200_000 {
            let g = s * &b - &cv;
            let next = (&b - g / l).map(|z| soft_threshold(z, lambda / l));
            let done = (&next - &b).amax() < 1e-14;
            b = next;
            if done {
                break;
            }
        }
        b.as_slice().to_vec()
    }

    #[test]
    fn matches_proximal_gradient_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let opts = SolverOptions {
            tol: 1e-10,
            ..SolverOptions::default()
        };
        for _ in 0..10 {
            let p = rng.gen_range(2..=6);
            let s = random_psd(&mut rng, p, p + 4);
            let c: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lam = rng.gen_range(0.01..0.3);
            let fit = cd_lasso(&cov(s.clone()), &c, lam, None, &opts).unwrap();
            let oracle = proximal_gradient(&s, &c, lam);
            for (a, b) in fit.beta.iter().zip(&oracle) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn objective_never_increases(seed in any::<u64>(), p in 2usize..10) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = random_psd(&mut rng, p, p + 2);
                let c: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let lam = rng.gen_range(0.001..0.2);
                let prob = LassoProblem::new(&s, &c, vec![false; p]).unwrap();
                let (_, trace) = prob.solve_traced(lam, None, &SolverOptions::default()).unwrap();
                let start = objective(&s, &c, &vec![0.0; p], lam);
                let mut prev = start;
                for f in trace {
                    prop_assert!(f <= prev + 1e-12 * (1.0 + prev.abs()));
                    prev = f;
                }
            }

            #[test]
            fn converged_fits_are_certified(seed in any::<u64>(), p in 2usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = random_psd(&mut rng, p, 3 * p);
                let c: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let opts = SolverOptions::default();
                let prob = LassoProblem::new(&s, &c, vec![false; p]).unwrap();
                let fit = prob.solve(rng.gen_range(0.001..0.5), None, &opts).unwrap();
                prop_assert!(!fit.converged || fit.kkt <= 10.0 * opts.tol);
            }

            #[test]
            fn permutation_equivariance(seed in any::<u64>(), p in 2usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = random_psd(&mut rng, p, 2 * p);
                let c: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let lam = rng.gen_range(0.01..0.3);
                let mut perm: Vec<usize> = (0..p).collect();
                perm.reverse();
                perm.rotate_left(seed as usize % p);
                let sp = DMatrix::from_fn(p, p, |i, j| s[(perm[i], perm[j])]);
                let cp: Vec<f64> = perm.iter().map(|&i| c[i]).collect();
                let opts = SolverOptions { tol: 1e-11, ..SolverOptions::default() };
                let a = LassoProblem::new(&s, &c, vec![false; p]).unwrap().solve(lam, None, &opts).unwrap();
                let b = LassoProblem::new(&sp, &cp, vec![false; p]).unwrap().solve(lam, None, &opts).unwrap();
                for i in 0..p {
                    prop_assert!((b.beta[i] - a.beta[perm[i]]).abs() <= 1e-7);
                }
            }
        }
    }
}
