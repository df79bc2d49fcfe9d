//! Nuclear-norm penalized GLM fitting by successive quadratic models, each
//! solved with scaled ADMM.

use nalgebra::{DMatrix, DVector};

use super::linalg::PdFactor;
use super::prox::svd_shrink;
use super::SolverOptions;
use crate::error::{Error, Result};
use crate::model::glm::{GlmObjective, HESSIAN_COORD_CAP};
use crate::model::{singular_values, Dataset, LossFamily, Parameter};

#[derive(Debug, Clone, PartialEq)]
pub struct NuclearFit {
    pub param: Parameter,
    pub outer_iterations: usize,
    /// Inner ADMM sweeps summed over all outer iterations.
    pub admm_iterations: usize,
    pub converged: bool,
    /// `L + lambda ||.||_N` at the initial point and after each outer step.
    pub objective_trace: Vec<f64>,
    /// Consensus residual `||gamma - delta + theta^(m)||_F` at the last inner exit.
    pub primal_residual: f64,
    pub dual_residual: f64,
}

pub fn quad_admm_nuclear_objective(d: &Dataset, lambda: f64, theta: &Parameter) -> Result<f64> {
    penalized_objective(&GlmObjective::from_dataset(d), lambda, theta)
}

fn penalized_objective(obj: &GlmObjective, lambda: f64, theta: &Parameter) -> Result<f64> {
    let nuc: f64 = singular_values(theta.as_matrix())?.iter().sum();
    Ok(obj.loss(theta)? + lambda * nuc)
}

/// Approximate minimizer of `L(theta) + lambda ||theta||_N` with `L` the
/// averaged loss of `d`.
pub fn quad_admm_nuclear(d: &Dataset, lambda: f64, init: &Parameter, opts: &SolverOptions) -> Result<NuclearFit> {
    quad_admm_nuclear_glm(&GlmObjective::from_dataset(d), lambda, init, opts)
}

/// Same as [`quad_admm_nuclear`] for an arbitrary weighted objective.
///
/// Outer step `m` replaces `L` by its second-order expansion at
/// `theta^(m)` and solves
/// `min <g, gamma> + 0.5 gamma' H gamma + lambda ||delta||_N` subject to
/// `delta = theta^(m) + gamma` by ADMM. If the new point does not lower the
/// true objective the step is halved until it does.
pub(crate) fn quad_admm_nuclear_glm(
    obj: &GlmObjective,
    lambda: f64,
    init: &Parameter,
    opts: &SolverOptions,
) -> Result<NuclearFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    opts.validate()?;
    let shape = obj.shape();
    if init.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            found: init.shape(),
        });
    }
    let q = shape.len();
    if q > HESSIAN_COORD_CAP {
        return Err(Error::Capacity {
            coords: q,
            cap: HESSIAN_COORD_CAP,
        });
    }
    let (d1, d2) = shape.dims();
    let rho = opts.admm_rho;
    let sqrt_q = (q as f64).sqrt();
    let constant_hessian = obj.family() == LossFamily::SquaredIdentity;

    let mut theta = init.as_matrix().clone();
    let mut current = penalized_objective(obj, lambda, init)?;
    let mut trace = vec![current];
    let mut nu = DMatrix::<f64>::zeros(d1, d2);
    let mut cached: Option<PdFactor> = None;
    let mut admm_total = 0;
    let mut outer = 0;
    let mut converged = false;
    let (mut primal, mut dual) = (0.0, 0.0);

    while outer < opts.max_outer_iterations {
        outer += 1;
        let theta_vec = DVector::from_column_slice(theta.as_slice());
        let eta = {
            let mut e = obj.design() * &theta_vec;
            if let Some(o) = obj.offset() {
                e += o;
            }
            e
        };
        let grad = obj.gradient_at_eta(&eta);
        let factor = match (&cached, constant_hessian) {
            (Some(f), true) => f.clone(),
            _ => {
                let mut a = obj.hessian_at_eta(&eta);
                for i in 0..q {
                    a[(i, i)] += rho;
                }
                PdFactor::new(&a)?
            }
        };

        let mut delta = theta.clone();
        let mut gamma = DVector::<f64>::zeros(q);
        let mut inner_ok = false;
        for _ in 0..opts.max_admm_iterations {
            admm_total += 1;
            let gamma_mat = DMatrix::from_column_slice(d1, d2, gamma.as_slice());
            let delta_new = svd_shrink(&(gamma_mat + &theta + &nu), lambda / rho)?;
            let target = &delta_new - &theta - &nu;
            let rhs = DVector::from_column_slice(target.as_slice()) * rho - &grad;
            gamma = factor.solve(&rhs)?;
            let gamma_mat = DMatrix::from_column_slice(d1, d2, gamma.as_slice());
            let resid = gamma_mat - &delta_new + &theta;
            nu += &resid;
            primal = resid.norm();
            dual = rho * (&delta_new - &delta).norm();
            let eps_pri = opts.residual_abs * sqrt_q + opts.residual_rel * gamma.norm().max((&delta_new - &theta).norm());
            let eps_dual = opts.residual_abs * sqrt_q + opts.residual_rel * rho * nu.norm();
            delta = delta_new;
            if primal <= eps_pri && dual <= eps_dual {
                inner_ok = true;
                break;
            }
        }
        if constant_hessian && cached.is_none() {
            cached = Some(factor);
        }

        let slack = 1e-12 * (1.0 + current.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = if step == 1.0 {
                delta.clone()
            } else {
                &theta + (&delta - &theta) * step
            };
            let val = penalized_objective(obj, lambda, &Parameter::from_raw(shape, cand.clone()))?;
            if val <= current + slack {
                accepted = Some((cand, val));
                break;
            }
            step *= 0.5;
        }
        let Some((next, val)) = accepted else {
            // no descent along the model direction: theta is stationary to working precision
            converged = inner_ok;
            break;
        };
        let change = (&next - &theta).norm();
        let scale = 1.0 + theta.norm();
        theta = next;
        current = val;
        trace.push(current);
        if inner_ok && change <= opts.tolerance * scale {
            converged = true;
            break;
        }
    }
    Ok(NuclearFit {
        param: Parameter::from_raw(shape, theta),
        outer_iterations: outer,
        admm_iterations: admm_total,
        converged,
        objective_trace: trace,
        primal_residual: primal,
        dual_residual: dual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Shape;
    use crate::solvers::solve_pd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tight() -> SolverOptions {
        SolverOptions {
            max_admm_iterations: 20_000,
            ..SolverOptions::default()
        }
        .tightened(1e-3)
    }

    fn linear_dataset(rng: &mut ChaCha8Rng, n: usize, d1: usize, d2: usize, noise: f64) -> (Dataset, DMatrix<f64>) {
        let truth = DMatrix::from_fn(d1, d2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, d1 * d2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &x * DVector::from_column_slice(truth.as_slice())
            + DVector::from_fn(n, |_, _| noise * rng.sample::<f64, _>(StandardNormal));
        let d = Dataset::from_design(Shape::Matrix(d1, d2), x, y, LossFamily::SquaredIdentity).unwrap();
        (d, truth)
    }

    #[test]
    fn tiny_lambda_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (d, _) = linear_dataset(&mut rng, 400, 3, 4, 0.5);
        let fit = quad_admm_nuclear(&d, 1e-8, &Parameter::zeros(d.shape()), &tight()).unwrap();
        assert!(fit.converged);
        let ols = solve_pd(&d.design().tr_mul(d.design()), &d.design().tr_mul(d.responses())).unwrap();
        let got = DVector::from_column_slice(fit.param.as_slice());
        assert!((got - ols).amax() <= 1e-3);
    }

    #[test]
    fn large_lambda_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (d, _) = linear_dataset(&mut rng, 50, 3, 3, 1.0);
        let lmax = crate::solvers::lambda_max(&d, crate::Regularizer::Nuclear).unwrap();
        let fit = quad_admm_nuclear(&d, 1.01 * lmax, &Parameter::zeros(d.shape()), &tight()).unwrap();
        assert!(fit.param.max_abs() <= 1e-6);
    }

    #[test]
    fn orthogonal_design_one_step_is_shrunk_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (n, d1, d2) = (60, 3, 4);
        let q = DMatrix::from_fn(n, d1 * d2, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let x = q * (n as f64).sqrt();
        let y = DVector::from_fn(n, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let d = Dataset::from_design(Shape::Matrix(d1, d2), x.clone(), y.clone(), LossFamily::SquaredIdentity).unwrap();
        let ols = x.tr_mul(&y) / n as f64;
        let ols = DMatrix::from_column_slice(d1, d2, ols.as_slice());
        let lambda = 0.3;
        let expect = svd_shrink(&ols, lambda).unwrap();
        let opts = SolverOptions {
            max_outer_iterations: 1,
            ..tight()
        };
        let fit = quad_admm_nuclear(&d, lambda, &Parameter::zeros(d.shape()), &opts).unwrap();
        assert!((fit.param.as_matrix() - expect).amax() <= 1e-5);
    }

    #[test]
    fn logistic_objective_decreases_and_residuals_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (n, d1, d2) = (300, 4, 4);
        let truth = DMatrix::from_fn(d1, 1, |_, _| rng.sample::<f64, _>(StandardNormal))
            * DMatrix::from_fn(1, d2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, d1 * d2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = &x * DVector::from_column_slice(truth.as_slice());
        let y = eta.map(|e| f64::from(rng.random::<f64>() < LossFamily::LogisticLogit.mean(e)));
        let d = Dataset::from_design(Shape::Matrix(d1, d2), x, y, LossFamily::LogisticLogit).unwrap();
        let opts = SolverOptions::default();
        let fit = quad_admm_nuclear(&d, 0.02, &Parameter::zeros(d.shape()), &opts).unwrap();
        assert!(fit.converged);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
        }
        let scale = fit.param.l2_norm().max(1.0);
        assert!(fit.primal_residual <= opts.residual_abs * 4.0 + opts.residual_rel * scale);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (d, _) = linear_dataset(&mut rng, 80, 3, 3, 1.0);
        let a = quad_admm_nuclear(&d, 0.1, &Parameter::zeros(d.shape()), &SolverOptions::default()).unwrap();
        let b = quad_admm_nuclear(&d, 0.1, &Parameter::zeros(d.shape()), &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
