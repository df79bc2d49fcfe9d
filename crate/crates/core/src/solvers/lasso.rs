//! Cyclic coordinate descent for `||y - X theta||^2 + n lambda ||theta||_1`.

use nalgebra::{DMatrix, DVector};

use super::prox::soft_threshold;
use super::SolverOptions;
use crate::error::{Error, Result};

/// Coordinate-descent result with convergence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coef: DVector<f64>,
    /// Coordinate sweeps performed (full and active-set).
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after every full sweep, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

pub fn lasso_objective(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, theta: &DVector<f64>) -> f64 {
    let r = y - x * theta;
    r.norm_squared() + x.nrows() as f64 * lambda * theta.lp_norm(1)
}

/// Largest KKT violation of the lasso optimality system, divided by `n`.
pub fn lasso_kkt_residual(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, theta: &DVector<f64>) -> f64 {
    let n = x.nrows() as f64;
    let r = y - x * theta;
    let mut worst = 0.0f64;
    for j in 0..x.ncols() {
        let g = 2.0 * x.column(j).dot(&r);
        let v = if theta[j] == 0.0 {
            (g.abs() - n * lambda).max(0.0)
        } else {
            (g - n * lambda * theta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst / n
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// Minimize `||y - X theta||^2 + n lambda ||theta||_1` starting from `init`.
///
/// Sweeps run in the fixed order `1..p`; between full sweeps the nonzero
/// coordinates are cycled until they settle. Stops once a full sweep moves
/// no coordinate by more than `tolerance` in gradient units
/// (`||x_j||^2 / n * |change|`).
pub fn lasso_cd(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    init: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<LassoFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::invalid(format!("{} responses for {n} design rows", y.len())));
    }
    if init.len() != p {
        return Err(Error::invalid(format!("init has length {}, design has {p} columns", init.len())));
    }
    check_lambda(lambda)?;
    opts.validate()?;
    let nf = n as f64;
    let half_pen = nf * lambda / 2.0;
    let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared()).collect();
    let mut theta = init.clone();
    for j in 0..p {
        if col_sq[j] == 0.0 {
            theta[j] = 0.0;
        }
    }
    let mut r = y - x * &theta;
    let objective = |r: &DVector<f64>, theta: &DVector<f64>| r.norm_squared() + nf * lambda * theta.lp_norm(1);
    let mut trace = vec![objective(&r, &theta)];

    let update = |j: usize, theta: &mut DVector<f64>, r: &mut DVector<f64>| -> f64 {
        let cs = col_sq[j];
        if cs == 0.0 {
            return 0.0;
        }
        let col = x.column(j);
        let old = theta[j];
        let z = col.dot(r) + cs * old;
        let new = soft_threshold(z, half_pen) / cs;
        let diff = new - old;
        if diff != 0.0 {
            r.axpy(-diff, &col, 1.0);
            theta[j] = new;
        }
        cs / nf * diff.abs()
    };

    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_iterations {
        let mut max_change = 0.0f64;
        for j in 0..p {
            max_change = max_change.max(update(j, &mut theta, &mut r));
        }
        sweeps += 1;
        trace.push(objective(&r, &theta));
        if max_change <= opts.tolerance {
            converged = true;
            break;
        }
        let active: Vec<usize> = (0..p).filter(|&j| theta[j] != 0.0).collect();
        while sweeps < opts.max_iterations {
            let mut change = 0.0f64;
            for &j in &active {
                change = change.max(update(j, &mut theta, &mut r));
            }
            sweeps += 1;
            if change <= opts.tolerance {
                break;
            }
        }
    }
    Ok(LassoFit {
        coef: theta,
        sweeps,
        converged,
        objective_trace: trace,
    })
}

/// Coordinate descent on `theta^T A theta - 2 b^T theta + pen ||theta||_1`
/// with `A = scale * G + ridge * I` for a fixed Gram matrix `G`.
///
/// Used where the same design is re-solved many times with a changing
/// linear term, as in the ADMM subproblems; each sweep costs `O(p^2)`
/// regardless of the sample size.
#[derive(Debug, Clone)]
pub struct GramLasso {
    gram: DMatrix<f64>,
    scale: f64,
    ridge: f64,
}

impl GramLasso {
    pub fn new(gram: DMatrix<f64>, scale: f64, ridge: f64) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::invalid("Gram matrix must be square"));
        }
        if !(scale >= 0.0 && scale.is_finite() && ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::invalid(format!("scale {scale} and ridge {ridge} must be finite and >= 0")));
        }
        Ok(GramLasso { gram, scale, ridge })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    fn diag(&self, j: usize) -> f64 {
        self.scale * self.gram[(j, j)] + self.ridge
    }

    fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.gram * theta * self.scale + theta * self.ridge
    }

    pub fn objective(&self, linear: &DVector<f64>, pen: f64, theta: &DVector<f64>) -> f64 {
        theta.dot(&self.apply(theta)) - 2.0 * linear.dot(theta) + pen * theta.lp_norm(1)
    }

    /// Stops once a full sweep moves no coordinate by more than
    /// `tolerance * max(1, ||theta||_inf)`.
    pub fn solve(&self, linear: &DVector<f64>, pen: f64, init: &DVector<f64>, opts: &SolverOptions) -> Result<LassoFit> {
        let p = self.dim();
        if linear.len() != p || init.len() != p {
            return Err(Error::invalid(format!(
                "linear term ({}) and init ({}) must have length {p}",
                linear.len(),
                init.len()
            )));
        }
        check_lambda(pen)?;
        let half_pen = pen / 2.0;
        let mut theta = init.clone();
        for j in 0..p {
            if self.diag(j) <= 0.0 {
                theta[j] = 0.0;
            }
        }
        // a_theta = A theta, maintained incrementally
        let mut a_theta = self.apply(&theta);
        let mut trace = vec![self.objective(linear, pen, &theta)];

        let update = |j: usize, theta: &mut DVector<f64>, a_theta: &mut DVector<f64>| -> f64 {
            let ajj = self.diag(j);
            if ajj <= 0.0 {
                return 0.0;
            }
            let old = theta[j];
            let z = linear[j] - a_theta[j] + ajj * old;
            let new = soft_threshold(z, half_pen) / ajj;
            let diff = new - old;
            if diff != 0.0 {
                a_theta.axpy(self.scale * diff, &self.gram.column(j), 1.0);
                a_theta[j] += self.ridge * diff;
                theta[j] = new;
            }
            diff.abs()
        };

        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < opts.max_iterations {
            let mut max_change = 0.0f64;
            for j in 0..p {
                max_change = max_change.max(update(j, &mut theta, &mut a_theta));
            }
            sweeps += 1;
            trace.push(self.objective(linear, pen, &theta));
            let tol = opts.tolerance * theta.amax().max(1.0);
            if max_change <= tol {
                converged = true;
                break;
            }
            let active: Vec<usize> = (0..p).filter(|&j| theta[j] != 0.0).collect();
            while sweeps < opts.max_iterations {
                let mut change = 0.0f64;
                for &j in &active {
                    change = change.max(update(j, &mut theta, &mut a_theta));
                }
                sweeps += 1;
                if change <= tol {
                    break;
                }
            }
        }
        Ok(LassoFit {
            coef: theta,
            sweeps,
            converged,
            objective_trace: trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tight() -> SolverOptions {
        SolverOptions {
            max_iterations: 100_000,
            ..SolverOptions::default()
        }
        .tightened(1e-4)
    }

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_response_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = gaussian(&mut rng, 10, 4);
        let fit = lasso_cd(&x, &DVector::zeros(10), 0.1, &DVector::zeros(4), &tight()).unwrap();
        assert_eq!(fit.coef, DVector::zeros(4));
        assert!(fit.converged);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let y = DVector::from_element(4, 2.0);
        let fit = lasso_cd(&x, &y, 2.0, &DVector::zeros(1), &tight()).unwrap();
        // (x'y - n lambda / 2)_+ / x'x = (8 - 4) / 4
        assert!((fit.coef[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_design_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let n = 20;
        let q = gaussian(&mut rng, n, 3).qr().q();
        let x = q * (n as f64).sqrt();
        let y = DVector::from_fn(n, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let lambda = 0.4;
        let fit = lasso_cd(&x, &y, lambda, &DVector::zeros(3), &tight()).unwrap();
        let xty = x.tr_mul(&y);
        for j in 0..3 {
            let expect = soft_threshold(xty[j], n as f64 * lambda / 2.0) / n as f64;
            assert!((fit.coef[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_column_stays_zero() {
        let mut x = DMatrix::from_element(5, 2, 1.0);
        x.column_mut(1).fill(0.0);
        let y = DVector::from_element(5, 3.0);
        let fit = lasso_cd(&x, &y, 0.1, &DVector::from_vec(vec![0.0, 7.0]), &tight()).unwrap();
        assert_eq!(fit.coef[1], 0.0);
    }

    #[test]
    fn dimension_checks() {
        let x = DMatrix::zeros(3, 2);
        let o = SolverOptions::default();
        assert!(lasso_cd(&x, &DVector::zeros(2), 0.1, &DVector::zeros(2), &o).is_err());
        assert!(lasso_cd(&x, &DVector::zeros(3), 0.1, &DVector::zeros(3), &o).is_err());
        assert!(lasso_cd(&x, &DVector::zeros(3), -0.1, &DVector::zeros(2), &o).is_err());
    }

    #[test]
    fn sweep_limit_flags_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut x = gaussian(&mut rng, 30, 10);
        // strongly correlated columns slow coordinate descent down
        for j in 1..10 {
            let c = x.column(0) + x.column(j) * 0.01;
            x.set_column(j, &c);
        }
        let y = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal));
        let opts = SolverOptions {
            max_iterations: 2,
            ..tight()
        };
        let fit = lasso_cd(&x, &y, 1e-4, &DVector::zeros(10), &opts).unwrap();
        assert!(!fit.converged);
        assert!(fit.sweeps <= 2);
    }

    #[test]
    fn gram_lasso_matches_residual_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (n, p) = (40, 15);
        let x = gaussian(&mut rng, n, p);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lambda = 0.2;
        let direct = lasso_cd(&x, &y, lambda, &DVector::zeros(p), &tight()).unwrap();
        let gl = GramLasso::new(x.tr_mul(&x), 1.0, 0.0).unwrap();
        let via_gram = gl.solve(&x.tr_mul(&y), n as f64 * lambda, &DVector::zeros(p), &tight()).unwrap();
        assert!((direct.coef - via_gram.coef).amax() < 1e-8);
    }

    #[test]
    fn gram_lasso_ridge_matches_augmented_rows() {
        // ridge term rho/2 ||theta - c||^2 equals extra rows sqrt(rho/2) I, sqrt(rho/2) c
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let (n, p) = (25, 8);
        let x = gaussian(&mut rng, n, p);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (alpha, rho, pen): (f64, f64, f64) = (1.7, 3.0, 4.0);
        let s = (rho / 2.0f64).sqrt();
        let mut xa = DMatrix::zeros(n + p, p);
        xa.rows_mut(0, n).copy_from(&(&x * alpha.sqrt()));
        xa.rows_mut(n, p).copy_from(&(DMatrix::identity(p, p) * s));
        let mut ya = DVector::zeros(n + p);
        ya.rows_mut(0, n).copy_from(&(&y * alpha.sqrt()));
        ya.rows_mut(n, p).copy_from(&(&c * s));
        let aug = lasso_cd(&xa, &ya, pen / (n + p) as f64, &DVector::zeros(p), &tight()).unwrap();
        let gl = GramLasso::new(x.tr_mul(&x), alpha, rho / 2.0).unwrap();
        let lin = x.tr_mul(&y) * alpha + &c * (rho / 2.0);
        let fit = gl.solve(&lin, pen, &DVector::zeros(p), &tight()).unwrap();
        assert!((aug.coef - fit.coef).amax() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn kkt_residual_small(seed in any::<u64>(), lambda in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, p) = (30, 12);
            let x = gaussian(&mut rng, n, p);
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let fit = lasso_cd(&x, &y, lambda, &DVector::zeros(p), &tight()).unwrap();
            prop_assert!(fit.converged);
            prop_assert!(lasso_kkt_residual(&x, &y, lambda, &fit.coef) <= 1e-6);
        }

        #[test]
        fn objective_monotone_over_sweeps(seed in any::<u64>(), lambda in 0.001f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, 20, 25);
            let y = DVector::from_fn(20, |_, _| rng.sample::<f64, _>(StandardNormal));
            let init = DVector::from_fn(25, |_, _| rng.sample::<f64, _>(StandardNormal));
            let fit = lasso_cd(&x, &y, lambda, &init, &tight()).unwrap();
            for w in fit.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
        }

        #[test]
        fn deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, 15, 6);
            let y = DVector::from_fn(15, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = lasso_cd(&x, &y, 0.05, &DVector::zeros(6), &SolverOptions::default()).unwrap();
            let b = lasso_cd(&x, &y, 0.05, &DVector::zeros(6), &SolverOptions::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
