use nalgebra::DVector;

use super::lasso::lasso_cd;
use super::nuclear::quad_admm_nuclear_glm;
use super::SolverOptions;
use crate::error::{Error, Result};
use crate::model::glm::GlmObjective;
use crate::model::{Dataset, LossFamily, Parameter, Regularizer};

/// A penalized fit with its convergence status.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub param: Parameter,
    pub converged: bool,
    pub iterations: usize,
}

fn check_pair(family: LossFamily, r: Regularizer) -> Result<()> {
    match (family, r) {
        (LossFamily::SquaredIdentity, Regularizer::L1) | (_, Regularizer::Nuclear) => Ok(()),
        (f, r) => Err(Error::UnsupportedModel(format!("{f} loss with {r} penalty"))),
    }
}

/// Minimizer of `L(theta) + lambda R(theta)` on one dataset, `L` averaged
/// over its `n` observations.
pub fn fit_single(d: &Dataset, r: Regularizer, lambda: f64, opts: &SolverOptions) -> Result<Parameter> {
    Ok(fit_dataset(d, r, lambda, None, opts)?.param)
}

/// `fit_single` with an optional warm start, keeping the convergence status.
pub fn fit_dataset(
    d: &Dataset,
    r: Regularizer,
    lambda: f64,
    init: Option<&Parameter>,
    opts: &SolverOptions,
) -> Result<FitOutcome> {
    check_pair(d.family(), r)?;
    if let Some(i) = init {
        d.check_param(i)?;
    }
    match r {
        Regularizer::L1 => {
            // ||y - X theta||^2 / (2n) + lambda |theta|_1, times 2n
            let start = init.map_or_else(|| DVector::zeros(d.shape().len()), |p| p.to_dvector());
            let fit = lasso_cd(d.design(), d.responses(), 2.0 * lambda, &start, opts)?;
            Ok(FitOutcome {
                param: Parameter::from_vec_shape(d.shape(), &fit.coef),
                converged: fit.converged,
                iterations: fit.sweeps,
            })
        }
        Regularizer::Nuclear => fit_glm(&GlmObjective::from_dataset(d), r, lambda, init, opts),
    }
}

/// Minimizer of a weighted (pooled or offset) objective plus `lambda R`.
pub(crate) fn fit_glm(
    obj: &GlmObjective,
    r: Regularizer,
    lambda: f64,
    init: Option<&Parameter>,
    opts: &SolverOptions,
) -> Result<FitOutcome> {
    check_pair(obj.family(), r)?;
    let shape = obj.shape();
    let start = match init {
        Some(p) => {
            if p.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    found: p.shape(),
                });
            }
            p.clone()
        }
        None => Parameter::zeros(shape),
    };
    match r {
        Regularizer::L1 => {
            // sum_i w_i (y_i - o_i - x_i theta)^2 / 2 + lambda |theta|_1 becomes a plain
            // lasso on rows scaled by sqrt(N w_i)
            let n = obj.n();
            let nf = n as f64;
            let mut x = obj.design().clone();
            let mut y = obj.responses().clone();
            if let Some(o) = obj.offset() {
                y -= o;
            }
            for (i, &w) in obj.weights().iter().enumerate() {
                let s = (nf * w).sqrt();
                if (s - 1.0).abs() > 1e-15 {
                    x.row_mut(i).scale_mut(s);
                    y[i] *= s;
                }
            }
            let fit = lasso_cd(&x, &y, 2.0 * lambda, &start.to_dvector(), opts)?;
            Ok(FitOutcome {
                param: Parameter::from_vec_shape(shape, &fit.coef),
                converged: fit.converged,
                iterations: fit.sweeps,
            })
        }
        Regularizer::Nuclear => {
            let fit = quad_admm_nuclear_glm(obj, lambda, &start, opts)?;
            Ok(FitOutcome {
                param: fit.param,
                converged: fit.converged,
                iterations: fit.admm_iterations,
            })
        }
    }
}

/// Smallest `lambda` whose fit is identically zero: `R*(grad L(0))`.
pub fn lambda_max(d: &Dataset, r: Regularizer) -> Result<f64> {
    lambda_max_glm(&GlmObjective::from_dataset(d), r)
}

pub(crate) fn lambda_max_glm(obj: &GlmObjective, r: Regularizer) -> Result<f64> {
    let g = obj.gradient(&Parameter::zeros(obj.shape()))?;
    r.dual_norm(&g)
}

/// Ordinary least squares through the normal equations; reference for
/// near-zero penalties.
#[cfg(test)]
pub(crate) fn normal_equations(x: &nalgebra::DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    super::solve_pd(&x.tr_mul(x), &x.tr_mul(y)).unwrap()
}
