//! Joint estimation with a truncated contrast penalty, which pools the
//! sources whose parameters stay within `tau` of the target and leaves the
//! others out.
//!
//! The objective
//! `sum_k alpha_k/N sum_i L_k(theta_k) + sum_k n_k lambda_P/N R(theta_k)
//!  + sum_{k>=1} n_k lambda_Q,k/N min(R(theta_k - theta_0), tau)`
//! is non-convex. Each DC iteration linearizes the concave part at the
//! current contrasts and solves the resulting convex problem by ADMM with
//! the splitting `delta_k = theta_0 - theta_k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::glm::{check_poolable, GlmObjective, HESSIAN_COORD_CAP};
use crate::model::{singular_values, Dataset, LossFamily, Parameter, Regularizer, Shape};
use crate::solvers::prox::soft_threshold;
use crate::solvers::{fit_dataset, svd_shrink, GramLasso, PdFactor, SolverOptions};

/// Halvings tried when a DC step fails to lower the objective.
const BACKTRACK_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub lambda_pool: f64,
    /// One contrast penalty per source.
    pub lambda_q: Vec<f64>,
    pub tau: f64,
    pub regularizer: Regularizer,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_dc_iterations")]
    pub max_dc_iterations: usize,
}

fn default_dc_iterations() -> usize {
    50
}

impl SelectionConfig {
    /// Config with the same contrast penalty for all `sources`.
    pub fn new(lambda_pool: f64, lambda_q: f64, sources: usize, tau: f64, regularizer: Regularizer) -> Self {
        SelectionConfig {
            lambda_pool,
            lambda_q: vec![lambda_q; sources],
            tau,
            regularizer,
            solver: SolverOptions::default(),
            max_dc_iterations: default_dc_iterations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_q.is_empty() {
            return Err(Error::invalid("at least one source is required"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be finite and > 0, got {}", self.tau)));
        }
        if !(self.lambda_pool.is_finite() && self.lambda_pool >= 0.0) {
            return Err(Error::invalid(format!("lambda_pool must be finite and >= 0, got {}", self.lambda_pool)));
        }
        if let Some(bad) = self.lambda_q.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("lambda_q entries must be finite and >= 0, got {bad}")));
        }
        if self.max_dc_iterations == 0 {
            return Err(Error::invalid("max_dc_iterations must be >= 1"));
        }
        self.solver.validate()
    }
}

/// Iterates of the DC/ADMM scheme; index 0 of `theta`, `gamma` and `mu`
/// is the target, `delta` and `nu` are indexed by source.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    pub theta: Vec<Parameter>,
    pub delta: Vec<Parameter>,
    /// Quadratic-model increments (trace case only; empty otherwise).
    pub gamma: Vec<Parameter>,
    pub nu: Vec<Parameter>,
    /// Duals of the quadratic-model constraint (trace case only).
    pub mu: Vec<Parameter>,
    /// Sum-scaled objective at the start and after every DC iteration.
    pub objective_trace: Vec<f64>,
    /// `R(delta_k) >= tau` at the last linearization point.
    pub truncation_indicators: Vec<bool>,
}

/// What happened in one DC iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcStep {
    /// Linearization indicators used by this iteration.
    pub indicators: Vec<bool>,
    /// Per source, whether the delta-update took the exact-consensus branch.
    pub exact_branch: Vec<bool>,
    pub admm_iterations: usize,
    pub admm_converged: bool,
    /// `sqrt(sum_k ||delta_k + theta_k - theta_0||^2)` at ADMM exit.
    pub primal_residual: f64,
    /// Stopping bound the primal residual was compared against.
    pub primal_bound: f64,
    pub objective: f64,
    /// 1 for a full step, a power of 1/2 after backtracking, 0 if rejected.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionFit {
    pub primal: Parameter,
    pub sources: Vec<Parameter>,
    pub informative_flags: Vec<bool>,
    pub dc_iterations: usize,
    pub converged: bool,
    pub steps: Vec<DcStep>,
    pub state: SelectionState,
}

/// `flag[k] = R(theta_k - theta_0) <= tau` for `thetas = [theta_0, theta_1, ..]`.
pub fn identify_informative(thetas: &[Parameter], tau: f64, r: Regularizer) -> Result<Vec<bool>> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!("tau must be finite and > 0, got {tau}")));
    }
    let (target, sources) = thetas
        .split_first()
        .ok_or_else(|| Error::invalid("need the target parameter"))?;
    sources
        .iter()
        .map(|t| Ok(r.norm(&t.checked_sub(target)?)? <= tau))
        .collect()
}

/// Value of the truncated-penalty objective (averaged scale) at `thetas`.
pub fn selection_objective(datasets: &[Dataset], cfg: &SelectionConfig, thetas: &[Parameter]) -> Result<f64> {
    check_inputs(datasets, cfg)?;
    if thetas.len() != datasets.len() {
        return Err(Error::invalid(format!("{} parameters for {} datasets", thetas.len(), datasets.len())));
    }
    let big_n: f64 = datasets.iter().map(|d| d.n() as f64).sum();
    let r = cfg.regularizer;
    let mut total = 0.0;
    for (k, (d, t)) in datasets.iter().zip(thetas).enumerate() {
        let n = d.n() as f64;
        total += d.weight() * n * GlmObjective::from_dataset(d).loss(t)? / big_n;
        total += n * cfg.lambda_pool * r.norm(t)? / big_n;
        if k > 0 {
            let contrast = r.norm(&thetas[0].checked_sub(t)?)?;
            total += n * cfg.lambda_q[k - 1] * contrast.min(cfg.tau) / big_n;
        }
    }
    Ok(total)
}

fn check_inputs(datasets: &[Dataset], cfg: &SelectionConfig) -> Result<()> {
    cfg.validate()?;
    if datasets.len() < 2 {
        return Err(Error::invalid("need a target and at least one source"));
    }
    if cfg.lambda_q.len() != datasets.len() - 1 {
        return Err(Error::invalid(format!(
            "{} contrast penalties for {} sources",
            cfg.lambda_q.len(),
            datasets.len() - 1
        )));
    }
    let refs: Vec<&Dataset> = datasets.iter().collect();
    check_poolable(&refs)
}

/// Dispatch on the regularizer.
pub fn dc_truncated(datasets: &[Dataset], cfg: &SelectionConfig, init: Option<&[Parameter]>) -> Result<SelectionFit> {
    match cfg.regularizer {
        Regularizer::L1 => dc_truncated_sparse_from(datasets, cfg, init),
        Regularizer::Nuclear => dc_truncated_trace_from(datasets, cfg, init),
    }
}

/// Sparse linear case; `datasets[0]` is the target.
pub fn dc_truncated_sparse(datasets: &[Dataset], cfg: &SelectionConfig) -> Result<SelectionFit> {
    dc_truncated_sparse_from(datasets, cfg, None)
}

/// Low-rank GLM trace case; `datasets[0]` is the target.
pub fn dc_truncated_trace(datasets: &[Dataset], cfg: &SelectionConfig) -> Result<SelectionFit> {
    dc_truncated_trace_from(datasets, cfg, None)
}

/// Per-dataset penalized fits at `lambda_P`, the default starting point.
pub fn initial_fits(datasets: &[Dataset], r: Regularizer, lambda_pool: f64, opts: &SolverOptions) -> Result<Vec<Parameter>> {
    datasets
        .iter()
        .map(|d| Ok(fit_dataset(d, r, lambda_pool, None, opts)?.param))
        .collect()
}

fn resolve_init(
    datasets: &[Dataset],
    cfg: &SelectionConfig,
    init: Option<&[Parameter]>,
) -> Result<Vec<Parameter>> {
    match init {
        Some(ps) => {
            if ps.len() != datasets.len() {
                return Err(Error::invalid(format!("{} initial parameters for {} datasets", ps.len(), datasets.len())));
            }
            for (d, p) in datasets.iter().zip(ps) {
                d.check_param(p)?;
            }
            Ok(ps.to_vec())
        }
        None => initial_fits(datasets, cfg.regularizer, cfg.lambda_pool, &cfg.solver),
    }
}

fn mean_n(datasets: &[Dataset]) -> f64 {
    datasets.iter().map(|d| d.n() as f64).sum::<f64>() / datasets.len() as f64
}

/// Outcome of one ADMM solve of the convex surrogate.
struct AdmmExit {
    iterations: usize,
    converged: bool,
    primal: f64,
    primal_bound: f64,
}

/// DC driver shared by both cases: `admm` solves the surrogate for fixed
/// indicators and leaves a candidate in the state; `objective` evaluates
/// the true objective; `contrast` gives `R(theta_0 - theta_k)`.
struct DcOutcome {
    steps: Vec<DcStep>,
    trace: Vec<f64>,
    indicators: Vec<bool>,
    converged: bool,
}

trait DcProblem {
    type Point: Clone;
    fn objective(&self, thetas: &Self::Point) -> Result<f64>;
    fn contrasts(&self, thetas: &Self::Point) -> Result<Vec<f64>>;
    fn admm(&mut self, indicators: &[bool]) -> Result<(AdmmExit, Self::Point)>;
    fn current(&self) -> Self::Point;
    fn interpolate(&self, from: &Self::Point, to: &Self::Point, t: f64) -> Self::Point;
    /// Install an accepted point; `full` is true when it is the ADMM output itself.
    fn accept(&mut self, point: Self::Point, full: bool);
    fn begin_iteration(&mut self) -> Result<()>;
}

fn run_dc<P: DcProblem>(prob: &mut P, tau: f64, max_dc: usize, tolerance: f64) -> Result<DcOutcome> {
    let start = prob.current();
    let mut current = prob.objective(&start)?;
    let mut trace = vec![current];
    let mut indicators: Vec<bool> = prob.contrasts(&start)?.into_iter().map(|c| c >= tau).collect();
    let mut steps = Vec::new();
    let mut converged = false;
    for _ in 0..max_dc {
        prob.begin_iteration()?;
        let old = prob.current();
        let (exit, candidate) = prob.admm(&indicators)?;
        let slack = 1e-12 * current.abs().max(1.0);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=BACKTRACK_STEPS {
            let point = if step == 1.0 {
                candidate.clone()
            } else {
                prob.interpolate(&old, &candidate, step)
            };
            let value = prob.objective(&point)?;
            if value <= current + slack {
                accepted = Some((point, value.min(current)));
                break;
            }
            step *= 0.5;
        }
        let exact_branch = indicators.clone();
        let Some((point, value)) = accepted else {
            steps.push(DcStep {
                indicators: indicators.clone(),
                exact_branch,
                admm_iterations: exit.iterations,
                admm_converged: exit.converged,
                primal_residual: exit.primal,
                primal_bound: exit.primal_bound,
                objective: current,
                step: 0.0,
            });
            // no descent from the surrogate minimizer: stationary to working precision
            converged = exit.converged;
            break;
        };
        prob.accept(point.clone(), step == 1.0);
        let decrease = (current - value) / current.abs().max(1.0);
        debug_assert!(value <= current + 1e-8 * current.abs().max(1.0));
        current = value;
        trace.push(current);
        steps.push(DcStep {
            indicators: indicators.clone(),
            exact_branch,
            admm_iterations: exit.iterations,
            admm_converged: exit.converged,
            primal_residual: exit.primal,
            primal_bound: exit.primal_bound,
            objective: current,
            step,
        });
        let next: Vec<bool> = prob.contrasts(&point)?.into_iter().map(|c| c >= tau).collect();
        let stable = next == indicators;
        indicators = next;
        if stable && decrease < tolerance && exit.converged {
            converged = true;
            break;
        }
    }
    Ok(DcOutcome {
        steps,
        trace,
        indicators,
        converged,
    })
}

// ---------------------------------------------------------------- sparse

struct SparseProblem<'a> {
    datasets: &'a [Dataset],
    /// `X_k^T y_k`.
    xty: Vec<DVector<f64>>,
    /// Gram-form solvers for the theta_k updates (index 0 is the target).
    solvers: Vec<GramLasso>,
    n: Vec<f64>,
    alpha: Vec<f64>,
    /// Penalties on the sum scale `alpha ||y - X theta||^2 + n lambda |theta|_1`.
    lam_p: f64,
    lam_q: Vec<f64>,
    tau: f64,
    rho: f64,
    opts: SolverOptions,
    theta: Vec<DVector<f64>>,
    delta: Vec<DVector<f64>>,
    nu: Vec<DVector<f64>>,
}

impl<'a> SparseProblem<'a> {
    fn new(datasets: &'a [Dataset], cfg: &SelectionConfig, init: Vec<Parameter>) -> Result<Self> {
        let k = datasets.len() - 1;
        let opts = cfg.solver;
        // the squared loss enters as alpha ||y - X theta||^2, twice the averaged scale
        let rho = opts.admm_rho * 2.0 * mean_n(datasets);
        let mut solvers = Vec::with_capacity(k + 1);
        let mut xty = Vec::with_capacity(k + 1);
        for (i, d) in datasets.iter().enumerate() {
            let x = d.design();
            let ridge = if i == 0 { k as f64 * rho / 2.0 } else { rho / 2.0 };
            solvers.push(GramLasso::new(x.tr_mul(x), d.weight(), ridge)?);
            xty.push(x.tr_mul(d.responses()));
        }
        let theta: Vec<DVector<f64>> = init.iter().map(|t| t.to_dvector()).collect();
        let delta = (1..=k).map(|j| &theta[0] - &theta[j]).collect();
        let p = theta[0].len();
        Ok(SparseProblem {
            datasets,
            xty,
            solvers,
            n: datasets.iter().map(|d| d.n() as f64).collect(),
            alpha: datasets.iter().map(|d| d.weight()).collect(),
            lam_p: 2.0 * cfg.lambda_pool,
            lam_q: cfg.lambda_q.iter().map(|l| 2.0 * l).collect(),
            tau: cfg.tau,
            rho,
            opts,
            theta,
            delta,
            nu: vec![DVector::zeros(p); k],
        })
    }

    fn k(&self) -> usize {
        self.datasets.len() - 1
    }

    /// `argmin alpha_k ||y_k - X_k theta||^2 + n_k lam_p |theta|_1 + rho/2 ||theta - center||^2`.
    fn theta_k_update(&self, k: usize, center: &DVector<f64>, warm: &DVector<f64>) -> Result<DVector<f64>> {
        let lin = &self.xty[k] * self.alpha[k] + center * (self.rho / 2.0);
        Ok(self.solvers[k].solve(&lin, self.n[k] * self.lam_p, warm, &self.opts)?.coef)
    }

    /// `argmin alpha_0 ||y_0 - X_0 theta||^2 + n_0 lam_p |theta|_1 + rho/2 sum_k ||theta - b_k||^2`.
    fn theta_0_update(&self, b_sum: &DVector<f64>, warm: &DVector<f64>) -> Result<DVector<f64>> {
        let lin = &self.xty[0] * self.alpha[0] + b_sum * (self.rho / 2.0);
        Ok(self.solvers[0].solve(&lin, self.n[0] * self.lam_p, warm, &self.opts)?.coef)
    }
}

impl DcProblem for SparseProblem<'_> {
    type Point = Vec<DVector<f64>>;

    fn objective(&self, thetas: &Self::Point) -> Result<f64> {
        let mut s = 0.0;
        for (k, d) in self.datasets.iter().enumerate() {
            let r = d.responses() - d.design() * &thetas[k];
            s += self.alpha[k] * r.norm_squared() + self.n[k] * self.lam_p * thetas[k].lp_norm(1);
            if k > 0 {
                let c = (&thetas[0] - &thetas[k]).lp_norm(1);
                s += self.n[k] * self.lam_q[k - 1] * c.min(self.tau);
            }
        }
        Ok(s)
    }

    fn contrasts(&self, thetas: &Self::Point) -> Result<Vec<f64>> {
        Ok((1..thetas.len()).map(|k| (&thetas[0] - &thetas[k]).lp_norm(1)).collect())
    }

    fn current(&self) -> Self::Point {
        self.theta.clone()
    }

    fn interpolate(&self, from: &Self::Point, to: &Self::Point, t: f64) -> Self::Point {
        from.iter().zip(to).map(|(a, b)| a + (b - a) * t).collect()
    }

    fn begin_iteration(&mut self) -> Result<()> {
        Ok(())
    }

    fn accept(&mut self, point: Self::Point, full: bool) {
        self.theta = point;
        if !full {
            for k in 1..=self.k() {
                self.delta[k - 1] = &self.theta[0] - &self.theta[k];
            }
        }
    }

    fn admm(&mut self, indicators: &[bool]) -> Result<(AdmmExit, Self::Point)> {
        let k_count = self.k();
        let p = self.theta[0].len();
        let dim_sqrt = ((k_count * p) as f64).sqrt();
        let mut theta = self.theta.clone();
        let mut delta = self.delta.clone();
        let mut nu = self.nu.clone();
        let mut exit = AdmmExit {
            iterations: 0,
            converged: false,
            primal: f64::INFINITY,
            primal_bound: 0.0,
        };
        for _ in 0..self.opts.max_admm_iterations {
            exit.iterations += 1;
            for k in 1..=k_count {
                let center = &theta[0] - &delta[k - 1] - &nu[k - 1];
                theta[k] = self.theta_k_update(k, &center, &theta[k])?;
            }
            let mut b_sum = DVector::zeros(p);
            for k in 1..=k_count {
                b_sum += &delta[k - 1] + &theta[k] + &nu[k - 1];
            }
            let theta0 = self.theta_0_update(&b_sum, &theta[0])?;
            let mut primal_sq = 0.0;
            let mut dual_sq = 0.0;
            let mut theta_sq = 0.0;
            let mut delta_sq = 0.0;
            for k in 1..=k_count {
                let v = &theta0 - &theta[k] - &nu[k - 1];
                let new_delta = if indicators[k - 1] {
                    v
                } else {
                    let a = self.n[k] * self.lam_q[k - 1] / self.rho;
                    v.map(|x| soft_threshold(x, a))
                };
                let resid = &new_delta + &theta[k] - &theta0;
                nu[k - 1] += &resid;
                primal_sq += resid.norm_squared();
                dual_sq += ((&new_delta - &delta[k - 1]) - (&theta0 - &theta[0])).norm_squared();
                theta_sq += theta[k].norm_squared();
                delta_sq += new_delta.norm_squared();
                delta[k - 1] = new_delta;
            }
            theta[0] = theta0;
            let primal = primal_sq.sqrt();
            let dual = self.rho * dual_sq.sqrt();
            let scale = theta_sq
                .sqrt()
                .max(theta[0].norm() * (k_count as f64).sqrt())
                .max(delta_sq.sqrt());
            let nu_norm: f64 = nu.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            let eps_pri = self.opts.residual_abs * dim_sqrt + self.opts.residual_rel * scale;
            let eps_dual = self.opts.residual_abs * dim_sqrt + self.opts.residual_rel * self.rho * nu_norm;
            exit.primal = primal;
            exit.primal_bound = eps_pri;
            if primal <= eps_pri && dual <= eps_dual {
                exit.converged = true;
                break;
            }
        }
        self.delta = delta;
        self.nu = nu;
        Ok((exit, theta))
    }
}

fn dc_truncated_sparse_from(
    datasets: &[Dataset],
    cfg: &SelectionConfig,
    init: Option<&[Parameter]>,
) -> Result<SelectionFit> {
    check_inputs(datasets, cfg)?;
    if cfg.regularizer != Regularizer::L1 {
        return Err(Error::UnsupportedModel("sparse selection needs the l1 penalty".into()));
    }
    let shape = datasets[0].shape();
    if shape.is_matrix() || datasets[0].family() != LossFamily::SquaredIdentity {
        return Err(Error::UnsupportedModel(format!(
            "sparse selection needs vector covariates and squared loss, got {shape} / {}",
            datasets[0].family()
        )));
    }
    let init = resolve_init(datasets, cfg, init)?;
    let mut prob = SparseProblem::new(datasets, cfg, init)?;
    let out = run_dc(&mut prob, cfg.tau, cfg.max_dc_iterations, cfg.solver.tolerance)?;
    let to_param = |v: &DVector<f64>| Parameter::from_vec_shape(shape, v);
    let thetas: Vec<Parameter> = prob.theta.iter().map(to_param).collect();
    let state = SelectionState {
        theta: thetas.clone(),
        delta: prob.delta.iter().map(to_param).collect(),
        gamma: Vec::new(),
        nu: prob.nu.iter().map(to_param).collect(),
        mu: Vec::new(),
        objective_trace: out.trace,
        truncation_indicators: out.indicators,
    };
    finish(thetas, cfg, out.steps, out.converged, state)
}

fn finish(
    thetas: Vec<Parameter>,
    cfg: &SelectionConfig,
    steps: Vec<DcStep>,
    converged: bool,
    state: SelectionState,
) -> Result<SelectionFit> {
    let informative_flags = identify_informative(&thetas, cfg.tau, cfg.regularizer)?;
    let mut it = thetas.into_iter();
    let primal = it.next().expect("target present");
    Ok(SelectionFit {
        primal,
        sources: it.collect(),
        informative_flags,
        dc_iterations: steps.len(),
        converged,
        steps,
        state,
    })
}

// ----------------------------------------------------------------- trace

struct TraceProblem<'a> {
    datasets: &'a [Dataset],
    objectives: Vec<GlmObjective>,
    shape: Shape,
    n: Vec<f64>,
    alpha: Vec<f64>,
    lam_p: f64,
    lam_q: Vec<f64>,
    tau: f64,
    rho1: f64,
    rho2: f64,
    opts: SolverOptions,
    identity: bool,
    theta: Vec<DMatrix<f64>>,
    delta: Vec<DMatrix<f64>>,
    nu: Vec<DMatrix<f64>>,
    gamma: Vec<DMatrix<f64>>,
    mu: Vec<DMatrix<f64>>,
    /// Expansion point of the quadratic models.
    anchor: Vec<DMatrix<f64>>,
    /// `n_k alpha_k grad L_k(anchor_k)`.
    grads: Vec<DVector<f64>>,
    factors: Vec<Option<PdFactor>>,
}

impl<'a> TraceProblem<'a> {
    fn new(datasets: &'a [Dataset], cfg: &SelectionConfig, init: Vec<Parameter>) -> Result<Self> {
        let k = datasets.len() - 1;
        let shape = datasets[0].shape();
        let nbar = mean_n(datasets);
        let theta: Vec<DMatrix<f64>> = init.iter().map(|t| t.as_matrix().clone()).collect();
        let delta = (1..=k).map(|j| &theta[0] - &theta[j]).collect();
        let (d1, d2) = shape.dims();
        let zero = DMatrix::zeros(d1, d2);
        Ok(TraceProblem {
            datasets,
            objectives: datasets.iter().map(GlmObjective::from_dataset).collect(),
            shape,
            n: datasets.iter().map(|d| d.n() as f64).collect(),
            alpha: datasets.iter().map(|d| d.weight()).collect(),
            lam_p: cfg.lambda_pool,
            lam_q: cfg.lambda_q.clone(),
            tau: cfg.tau,
            rho1: cfg.solver.admm_rho1 * nbar,
            rho2: cfg.solver.admm_rho2 * nbar,
            opts: cfg.solver,
            identity: datasets[0].family() == LossFamily::SquaredIdentity,
            anchor: theta.clone(),
            theta,
            delta,
            nu: vec![zero.clone(); k],
            gamma: vec![zero.clone(); k + 1],
            mu: vec![zero; k + 1],
            grads: Vec::new(),
            factors: vec![None; k + 1],
        })
    }

    fn k(&self) -> usize {
        self.datasets.len() - 1
    }

    fn nuclear(m: &DMatrix<f64>) -> Result<f64> {
        Ok(singular_values(m)?.iter().sum())
    }
}

impl DcProblem for TraceProblem<'_> {
    type Point = Vec<DMatrix<f64>>;

    fn objective(&self, thetas: &Self::Point) -> Result<f64> {
        let mut s = 0.0;
        for k in 0..thetas.len() {
            let p = Parameter::from_raw(self.shape, thetas[k].clone());
            s += self.n[k] * self.alpha[k] * self.objectives[k].loss(&p)?;
            s += self.n[k] * self.lam_p * Self::nuclear(&thetas[k])?;
            if k > 0 {
                let c = Self::nuclear(&(&thetas[0] - &thetas[k]))?;
                s += self.n[k] * self.lam_q[k - 1] * c.min(self.tau);
            }
        }
        Ok(s)
    }

    fn contrasts(&self, thetas: &Self::Point) -> Result<Vec<f64>> {
        (1..thetas.len()).map(|k| Self::nuclear(&(&thetas[0] - &thetas[k]))).collect()
    }

    fn current(&self) -> Self::Point {
        self.theta.clone()
    }

    fn interpolate(&self, from: &Self::Point, to: &Self::Point, t: f64) -> Self::Point {
        from.iter().zip(to).map(|(a, b)| a + (b - a) * t).collect()
    }

    fn begin_iteration(&mut self) -> Result<()> {
        // expand every loss around the current iterate
        let q = self.shape.len();
        self.anchor = self.theta.clone();
        self.grads.clear();
        for k in 0..self.theta.len() {
            let obj = &self.objectives[k];
            let eta = obj.design() * DVector::from_column_slice(self.anchor[k].as_slice());
            let scale = self.n[k] * self.alpha[k];
            self.grads.push(obj.gradient_at_eta(&eta) * scale);
            if self.factors[k].is_none() || !self.identity {
                let mut a = obj.hessian_at_eta(&eta) * scale;
                for i in 0..q {
                    a[(i, i)] += self.rho2;
                }
                self.factors[k] = Some(PdFactor::new(&a)?);
            }
            self.gamma[k].fill(0.0);
        }
        Ok(())
    }

    fn accept(&mut self, point: Self::Point, full: bool) {
        self.theta = point;
        if !full {
            for k in 1..=self.k() {
                self.delta[k - 1] = &self.theta[0] - &self.theta[k];
            }
        }
    }

    fn admm(&mut self, indicators: &[bool]) -> Result<(AdmmExit, Self::Point)> {
        let k_count = self.k();
        let (d1, d2) = self.shape.dims();
        let q = self.shape.len();
        let (rho1, rho2) = (self.rho1, self.rho2);
        let dim_sqrt = ((k_count * q) as f64).sqrt();
        let mut theta = self.theta.clone();
        let mut exit = AdmmExit {
            iterations: 0,
            converged: false,
            primal: f64::INFINITY,
            primal_bound: 0.0,
        };
        for _ in 0..self.opts.max_admm_iterations {
            exit.iterations += 1;
            for k in 1..=k_count {
                let center = ((&theta[0] - &self.delta[k - 1] - &self.nu[k - 1]) * rho1
                    + (&self.gamma[k] + &self.anchor[k] + &self.mu[k]) * rho2)
                    / (rho1 + rho2);
                theta[k] = svd_shrink(&center, self.n[k] * self.lam_p / (rho1 + rho2))?;
            }
            let kf = k_count as f64;
            let mut acc = (&self.gamma[0] + &self.anchor[0] + &self.mu[0]) * rho2;
            for k in 1..=k_count {
                acc += (&self.delta[k - 1] + &theta[k] + &self.nu[k - 1]) * rho1;
            }
            let theta0 = svd_shrink(&(acc / (kf * rho1 + rho2)), self.n[0] * self.lam_p / (kf * rho1 + rho2))?;

            let mut primal_sq = 0.0;
            let mut dual_sq = 0.0;
            let mut scale_sq = 0.0;
            let mut dual_norm_sq = 0.0;
            for k in 1..=k_count {
                let v = &theta0 - &theta[k] - &self.nu[k - 1];
                let new_delta = if indicators[k - 1] {
                    v
                } else {
                    svd_shrink(&v, self.n[k] * self.lam_q[k - 1] / rho1)?
                };
                let resid = &new_delta + &theta[k] - &theta0;
                self.nu[k - 1] += &resid;
                primal_sq += resid.norm_squared();
                dual_sq += (rho1 * ((&new_delta - &self.delta[k - 1]) - (&theta0 - &theta[0]))).norm_squared();
                scale_sq += theta[k].norm_squared().max(new_delta.norm_squared());
                dual_norm_sq += (rho1 * &self.nu[k - 1]).norm_squared();
                self.delta[k - 1] = new_delta;
            }
            theta[0] = theta0;
            for k in 0..=k_count {
                let target = &theta[k] - &self.anchor[k] - &self.mu[k];
                let rhs = DVector::from_column_slice(target.as_slice()) * rho2 - &self.grads[k];
                let g = self.factors[k].as_ref().expect("factored").solve(&rhs)?;
                let g = DMatrix::from_column_slice(d1, d2, g.as_slice());
                let resid = &g - &theta[k] + &self.anchor[k];
                self.mu[k] += &resid;
                primal_sq += resid.norm_squared();
                dual_sq += (rho2 * (&g - &self.gamma[k])).norm_squared();
                dual_norm_sq += (rho2 * &self.mu[k]).norm_squared();
                self.gamma[k] = g;
            }
            let primal = primal_sq.sqrt();
            let scale = scale_sq.sqrt().max(theta[0].norm() * kf.sqrt());
            let eps_pri = self.opts.residual_abs * dim_sqrt + self.opts.residual_rel * scale;
            let eps_dual = self.opts.residual_abs * dim_sqrt + self.opts.residual_rel * dual_norm_sq.sqrt();
            exit.primal = primal;
            exit.primal_bound = eps_pri;
            if primal <= eps_pri && dual_sq.sqrt() <= eps_dual {
                exit.converged = true;
                break;
            }
        }
        Ok((exit, theta))
    }
}

fn dc_truncated_trace_from(
    datasets: &[Dataset],
    cfg: &SelectionConfig,
    init: Option<&[Parameter]>,
) -> Result<SelectionFit> {
    check_inputs(datasets, cfg)?;
    if cfg.regularizer != Regularizer::Nuclear {
        return Err(Error::UnsupportedModel("trace selection needs the nuclear penalty".into()));
    }
    let shape = datasets[0].shape();
    if !shape.is_matrix() {
        return Err(Error::UnsupportedModel(format!("trace selection needs matrix covariates, got {shape}")));
    }
    if shape.len() > HESSIAN_COORD_CAP {
        return Err(Error::Capacity {
            coords: shape.len(),
            cap: HESSIAN_COORD_CAP,
        });
    }
    let init = resolve_init(datasets, cfg, init)?;
    let mut prob = TraceProblem::new(datasets, cfg, init)?;
    let out = run_dc(&mut prob, cfg.tau, cfg.max_dc_iterations, cfg.solver.tolerance)?;
    let to_param = |m: &DMatrix<f64>| Parameter::from_raw(shape, m.clone());
    let thetas: Vec<Parameter> = prob.theta.iter().map(to_param).collect();
    let state = SelectionState {
        theta: thetas.clone(),
        delta: prob.delta.iter().map(to_param).collect(),
        gamma: prob.gamma.iter().map(to_param).collect(),
        nu: prob.nu.iter().map(to_param).collect(),
        mu: prob.mu.iter().map(to_param).collect(),
        objective_trace: out.trace,
        truncation_indicators: out.indicators,
    };
    finish(thetas, cfg, out.steps, out.converged, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::lasso_cd;

    #[test]
    fn identify_flags() {
        let t0 = Parameter::from_vec(vec![1.0, 0.0]).unwrap();
        let same = t0.clone();
        let far = Parameter::from_vec(vec![1.0, 2.0]).unwrap();
        let flags = identify_informative(&[t0, same, far], 1.0, Regularizer::L1).unwrap();
        assert_eq!(flags, vec![true, false]);
        assert!(identify_informative(&[], 1.0, Regularizer::L1).is_err());
        let z = Parameter::zeros(Shape::Vector(1));
        assert!(identify_informative(&[z.clone(), z], 0.0, Regularizer::L1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SelectionConfig::new(0.1, 0.1, 2, 1.0, Regularizer::L1);
        assert!(cfg.validate().is_ok());
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.tau = 1.0;
        cfg.lambda_q.clear();
        assert!(cfg.validate().is_err());
    }

    fn small_problem(seed: u64) -> Vec<Dataset> {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|_| {
                let x = DMatrix::from_fn(30, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal));
                Dataset::vector(x, y, LossFamily::SquaredIdentity).unwrap()
            })
            .collect()
    }

    #[test]
    fn theta_k_update_matches_artificial_observations() {
        let data = small_problem(71);
        let cfg = SelectionConfig::new(0.05, 0.1, 2, 1.0, Regularizer::L1);
        let init = initial_fits(&data, Regularizer::L1, 0.05, &cfg.solver).unwrap();
        let mut prob = SparseProblem::new(&data, &cfg, init).unwrap();
        prob.opts = prob.opts.tightened(1e-4);
        let center = DVector::from_fn(8, |i, _| 0.1 * i as f64 - 0.3);
        let got = prob.theta_k_update(1, &center, &DVector::zeros(8)).unwrap();

        // literal stacked rows: sqrt(beta) X, sqrt(rho/2) I against sqrt(beta) y, sqrt(rho/2) center
        let d = &data[1];
        let (n, p) = (d.n(), 8);
        let s = (prob.rho / 2.0).sqrt();
        let beta = d.weight().sqrt();
        let mut x = DMatrix::zeros(n + p, p);
        x.rows_mut(0, n).copy_from(&(d.design() * beta));
        x.rows_mut(n, p).copy_from(&(DMatrix::identity(p, p) * s));
        let mut y = DVector::zeros(n + p);
        y.rows_mut(0, n).copy_from(&(d.responses() * beta));
        y.rows_mut(n, p).copy_from(&(&center * s));
        let pen = n as f64 * prob.lam_p;
        let opts = SolverOptions {
            max_iterations: 100_000,
            ..cfg.solver
        }
        .tightened(1e-4);
        let oracle = lasso_cd(&x, &y, pen / (n + p) as f64, &DVector::zeros(p), &opts).unwrap();
        assert!((got - oracle.coef).amax() < 1e-7);
    }

    #[test]
    fn theta_0_update_matches_artificial_observations() {
        let data = small_problem(72);
        let cfg = SelectionConfig::new(0.05, 0.1, 2, 1.0, Regularizer::L1);
        let init = initial_fits(&data, Regularizer::L1, 0.05, &cfg.solver).unwrap();
        let mut prob = SparseProblem::new(&data, &cfg, init).unwrap();
        prob.opts = prob.opts.tightened(1e-4);
        let b1 = DVector::from_fn(8, |i, _| 0.05 * i as f64);
        let b2 = DVector::from_fn(8, |i, _| -0.02 * i as f64 + 0.1);
        let got = prob.theta_0_update(&(&b1 + &b2), &DVector::zeros(8)).unwrap();

        let d = &data[0];
        let (n, p) = (d.n(), 8);
        let s = (prob.rho / 2.0).sqrt();
        let rows = n + 2 * p;
        let mut x = DMatrix::zeros(rows, p);
        x.rows_mut(0, n).copy_from(d.design());
        x.rows_mut(n, p).copy_from(&(DMatrix::identity(p, p) * s));
        x.rows_mut(n + p, p).copy_from(&(DMatrix::identity(p, p) * s));
        let mut y = DVector::zeros(rows);
        y.rows_mut(0, n).copy_from(d.responses());
        y.rows_mut(n, p).copy_from(&(&b1 * s));
        y.rows_mut(n + p, p).copy_from(&(&b2 * s));
        let pen = n as f64 * prob.lam_p;
        let opts = SolverOptions {
            max_iterations: 100_000,
            ..cfg.solver
        }
        .tightened(1e-4);
        let oracle = lasso_cd(&x, &y, pen / rows as f64, &DVector::zeros(p), &opts).unwrap();
        assert!((got - oracle.coef).amax() < 1e-7);
    }

    #[test]
    fn sum_scale_objective_matches_averaged_objective() {
        let data = small_problem(73);
        let cfg = SelectionConfig::new(0.05, 0.2, 2, 0.5, Regularizer::L1);
        let init = initial_fits(&data, Regularizer::L1, 0.05, &cfg.solver).unwrap();
        let prob = SparseProblem::new(&data, &cfg, init.clone()).unwrap();
        let s = prob.objective(&prob.theta).unwrap();
        let avg = selection_objective(&data, &cfg, &init).unwrap();
        let big_n: f64 = data.iter().map(|d| d.n() as f64).sum();
        let yy: f64 = data.iter().map(|d| d.weight() * d.responses().norm_squared()).sum();
        assert!((s - (2.0 * big_n * avg + yy)).abs() <= 1e-9 * s.abs());
    }
}
