//! Two-step oracle transfer: pool the target with informative sources,
//! then correct the pooled estimate on the target alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::glm::GlmObjective;
use crate::model::{Dataset, Parameter, Regularizer};
use crate::solvers::{fit_glm, lambda_max_glm, SolverOptions};

/// Penalty level used for the near-unpenalized end of the constrained form.
const TINY_ZETA: f64 = 1e-8;
const BISECTION_STEPS: usize = 20;

/// How the pooled estimate is corrected on the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTune {
    /// `argmin L_0(theta_P + delta) + zeta R(delta)`.
    Lagrangian(f64),
    /// `argmin L_0(theta_P + delta)` subject to `R(delta) <= r`.
    Constrained(f64),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub lambda_pool: f64,
    pub finetune: FineTune,
    pub regularizer: Regularizer,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl TransferConfig {
    pub fn new(lambda_pool: f64, finetune: FineTune, regularizer: Regularizer) -> Self {
        TransferConfig {
            lambda_pool,
            finetune,
            regularizer,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        nonneg("lambda_pool", self.lambda_pool)?;
        match self.finetune {
            FineTune::Lagrangian(z) => nonneg("zeta", z)?,
            FineTune::Constrained(r) => nonneg("radius", r)?,
            FineTune::None => {}
        }
        self.solver.validate()
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferDiagnostics {
    pub pool_converged: bool,
    pub pool_iterations: usize,
    /// `L_P + lambda_P R` at the pooled estimate.
    pub pool_objective: f64,
    /// Which fine-tuning form produced the output.
    pub finetune: FineTune,
    pub finetune_converged: bool,
    pub finetune_iterations: usize,
    /// Penalty level of the final fine-tuning solve (the bisection result
    /// for the constrained form).
    pub zeta: Option<f64>,
    /// False when constrained bisection ended without the constraint binding
    /// within tolerance.
    pub bracketed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferFit {
    pub primal: Parameter,
    pub finetuned: Parameter,
    pub delta: Parameter,
    pub diagnostics: TransferDiagnostics,
}

/// Result of one fine-tuning solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneFit {
    pub delta: Parameter,
    pub finetuned: Parameter,
    pub converged: bool,
    pub iterations: usize,
    pub zeta: f64,
    pub bracketed: bool,
}

/// Weighted pooled estimate `argmin (1/n_P) sum_k alpha_k sum_i L_k + lambda_P R`.
///
/// `alpha_k` is each dataset's weight.
pub fn pooled_estimate(datasets: &[Dataset], cfg: &TransferConfig) -> Result<Parameter> {
    cfg.validate()?;
    let refs: Vec<&Dataset> = datasets.iter().collect();
    Ok(pooled_fit(&refs, cfg.regularizer, cfg.lambda_pool, None, &cfg.solver)?.0)
}

pub(crate) fn pooled_fit(
    datasets: &[&Dataset],
    r: Regularizer,
    lambda: f64,
    init: Option<&Parameter>,
    opts: &SolverOptions,
) -> Result<(Parameter, bool, usize, f64)> {
    let obj = GlmObjective::pooled(datasets)?;
    let fit = fit_glm(&obj, r, lambda, init, opts)?;
    let value = obj.loss(&fit.param)? + lambda * r.norm(&fit.param)?;
    Ok((fit.param, fit.converged, fit.iterations, value))
}

/// `delta = argmin L_0(theta_P + delta) + zeta R(delta)`; returns
/// `(delta, theta_P + delta)`.
pub fn fine_tune_lagrangian(
    target: &Dataset,
    primal: &Parameter,
    zeta: f64,
    r: Regularizer,
    opts: &SolverOptions,
) -> Result<(Parameter, Parameter)> {
    let fit = fine_tune_lagrangian_fit(target, primal, zeta, r, None, opts)?;
    Ok((fit.delta, fit.finetuned))
}

pub(crate) fn fine_tune_lagrangian_fit(
    target: &Dataset,
    primal: &Parameter,
    zeta: f64,
    r: Regularizer,
    init: Option<&Parameter>,
    opts: &SolverOptions,
) -> Result<FineTuneFit> {
    nonneg("zeta", zeta)?;
    target.check_param(primal)?;
    let obj = GlmObjective::from_dataset(target).with_base(primal)?;
    let fit = fit_glm(&obj, r, zeta, init, opts)?;
    let finetuned = primal.checked_add(&fit.param)?;
    Ok(FineTuneFit {
        delta: fit.param,
        finetuned,
        converged: fit.converged,
        iterations: fit.iterations,
        zeta,
        bracketed: true,
    })
}

/// `delta = argmin L_0(theta_P + delta)` subject to `R(delta) <= radius`,
/// found by bisection on the Lagrangian penalty.
pub fn fine_tune_constrained(
    target: &Dataset,
    primal: &Parameter,
    radius: f64,
    r: Regularizer,
    opts: &SolverOptions,
) -> Result<(Parameter, Parameter)> {
    let fit = fine_tune_constrained_fit(target, primal, radius, r, opts)?;
    Ok((fit.delta, fit.finetuned))
}

pub(crate) fn fine_tune_constrained_fit(
    target: &Dataset,
    primal: &Parameter,
    radius: f64,
    r: Regularizer,
    opts: &SolverOptions,
) -> Result<FineTuneFit> {
    nonneg("radius", radius)?;
    target.check_param(primal)?;
    let obj = GlmObjective::from_dataset(target).with_base(primal)?;
    let zero = Parameter::zeros(primal.shape());
    let zeta_max = lambda_max_glm(&obj, r)?;
    if radius == 0.0 || zeta_max == 0.0 {
        return Ok(FineTuneFit {
            delta: zero,
            finetuned: primal.clone(),
            converged: true,
            iterations: 0,
            zeta: zeta_max,
            bracketed: true,
        });
    }

    let slack = fine_tune_lagrangian_fit(target, primal, TINY_ZETA, r, None, opts)?;
    if r.norm(&slack.delta)? <= radius {
        return Ok(slack);
    }

    // norm of delta(zeta) decreases from above `radius` at TINY_ZETA to 0 at zeta_max
    let (mut lo, mut hi) = (TINY_ZETA, zeta_max);
    let mut best = FineTuneFit {
        delta: zero,
        finetuned: primal.clone(),
        converged: true,
        iterations: 0,
        zeta: zeta_max,
        bracketed: false,
    };
    let mut warm = slack.delta;
    let mut total_iterations = slack.iterations;
    let mut all_converged = slack.converged;
    for _ in 0..BISECTION_STEPS {
        let mid = (lo * hi).sqrt();
        let fit = fine_tune_lagrangian_fit(target, primal, mid, r, Some(&warm), opts)?;
        total_iterations += fit.iterations;
        all_converged &= fit.converged;
        let norm = r.norm(&fit.delta)?;
        warm = fit.delta.clone();
        if norm <= radius {
            hi = mid;
            let binds = norm >= 0.99 * radius;
            best = FineTuneFit { bracketed: binds, ..fit };
            if binds {
                break;
            }
        } else {
            lo = mid;
        }
    }
    best.converged = all_converged;
    best.iterations = total_iterations;
    Ok(best)
}

/// Pool, then fine-tune on `datasets[target_index]`.
pub fn oracle_transfer(datasets: &[Dataset], target_index: usize, cfg: &TransferConfig) -> Result<TransferFit> {
    cfg.validate()?;
    let target = datasets.get(target_index).ok_or_else(|| {
        Error::invalid(format!("target index {target_index} out of range for {} datasets", datasets.len()))
    })?;
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let (primal, pool_converged, pool_iterations, pool_objective) =
        pooled_fit(&refs, cfg.regularizer, cfg.lambda_pool, None, &cfg.solver)?;
    let tuned = match cfg.finetune {
        FineTune::Lagrangian(z) => Some(fine_tune_lagrangian_fit(target, &primal, z, cfg.regularizer, None, &cfg.solver)?),
        FineTune::Constrained(radius) => {
            Some(fine_tune_constrained_fit(target, &primal, radius, cfg.regularizer, &cfg.solver)?)
        }
        FineTune::None => None,
    };
    Ok(assemble(primal, pool_converged, pool_iterations, pool_objective, cfg.finetune, tuned))
}

pub(crate) fn assemble(
    primal: Parameter,
    pool_converged: bool,
    pool_iterations: usize,
    pool_objective: f64,
    finetune: FineTune,
    tuned: Option<FineTuneFit>,
) -> TransferFit {
    let mut diagnostics = TransferDiagnostics {
        pool_converged,
        pool_iterations,
        pool_objective,
        finetune,
        finetune_converged: true,
        finetune_iterations: 0,
        zeta: None,
        bracketed: true,
    };
    match tuned {
        Some(t) => {
            diagnostics.finetune_converged = t.converged;
            diagnostics.finetune_iterations = t.iterations;
            diagnostics.zeta = Some(t.zeta);
            diagnostics.bracketed = t.bracketed;
            TransferFit {
                primal,
                finetuned: t.finetuned,
                delta: t.delta,
                diagnostics,
            }
        }
        None => TransferFit {
            delta: Parameter::zeros(primal.shape()),
            finetuned: primal.clone(),
            primal,
            diagnostics,
        },
    }
}
