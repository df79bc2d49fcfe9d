//! Replication engine for the simulation studies: estimator registry,
//! error metrics, selection rates, aggregation, rate slopes and the
//! best-estimator frequencies across contrast levels.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, replication_seed, CoeffFamily, Design, Dims, GeneratedStudy, ScenarioConfig};
use crate::error::{Error, Result};
use crate::model::{singular_values, Dataset, LossFamily, Parameter, Regularizer};
use crate::selection::{dc_truncated, initial_fits, SelectionConfig};
use crate::solvers::{fit_dataset, SolverOptions};
use crate::transfer::{fine_tune_lagrangian_fit, pooled_fit};
use crate::tuning::{cv_finetune, fold_partition, cv_pooled, cv_vanilla, grid_select, Criterion, LambdaPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorMetrics {
    pub l1: f64,
    pub l2: f64,
    /// Matrix parameters only.
    pub nuclear: Option<f64>,
    pub frobenius: Option<f64>,
}

/// Entrywise l1/l2 errors, plus nuclear and Frobenius errors for matrices.
pub fn error_metrics(estimate: &Parameter, truth: &Parameter) -> Result<ErrorMetrics> {
    let d = estimate.checked_sub(truth)?;
    let l2 = d.l2_norm();
    let (nuclear, frobenius) = if d.shape().is_matrix() {
        (Some(singular_values(d.as_matrix())?.iter().sum()), Some(l2))
    } else {
        (None, None)
    };
    Ok(ErrorMetrics {
        l1: d.l1_norm(),
        l2,
        nuclear,
        frobenius,
    })
}

/// True positive and true negative rates of informative-source flags;
/// a rate is `None` when its class is absent from `truth`.
pub fn tpr_tnr(flags: &[bool], truth: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    if flags.len() != truth.len() {
        return Err(Error::invalid(format!("{} flags for {} sources", flags.len(), truth.len())));
    }
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&f, &t) in flags.iter().zip(truth) {
        if t {
            pos += 1;
            tp += usize::from(f);
        } else {
            neg += 1;
            tn += usize::from(!f);
        }
    }
    let rate = |hit: usize, all: usize| (all > 0).then(|| hit as f64 / all as f64);
    Ok((rate(tp, pos), rate(tn, neg)))
}

/// Least-squares slope of `ln(error)` against `ln(n)`.
pub fn rate_slope(ns: &[f64], errors: &[f64]) -> Result<f64> {
    if ns.len() != errors.len() || ns.len() < 3 {
        return Err(Error::invalid("rate slope needs at least 3 paired points"));
    }
    if ns.iter().chain(errors).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("rate slope needs positive finite sizes and errors"));
    }
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("rate slope needs distinct sizes"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    /// Target-only fit with the cross-validated penalty.
    Vanilla,
    /// Pooling of the target and the truly informative sources.
    Pooled { policy: LambdaPolicy, finetuned: bool },
    /// Pooling of every dataset.
    BlindPooled { finetuned: bool },
    /// Truncated-penalty joint estimate of the target.
    Truncated { finetuned: bool },
    /// Population pooled parameter of the informative set (a diagnostic, not an estimate).
    PopulationPooled,
}

impl Estimator {
    pub fn finetuned(self) -> bool {
        matches!(
            self,
            Estimator::Pooled { finetuned: true, .. }
                | Estimator::BlindPooled { finetuned: true }
                | Estimator::Truncated { finetuned: true }
        )
    }

    fn primal(self) -> Estimator {
        match self {
            Estimator::Pooled { policy, .. } => Estimator::Pooled {
                policy,
                finetuned: false,
            },
            Estimator::BlindPooled { .. } => Estimator::BlindPooled { finetuned: false },
            Estimator::Truncated { .. } => Estimator::Truncated { finetuned: false },
            other => other,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self {
            Estimator::Vanilla => "vanilla",
            Estimator::Pooled { policy, .. } => match policy {
                LambdaPolicy::Cv => "pooled_cv",
                LambdaPolicy::Stronger => "pooled_strong",
                LambdaPolicy::HalfVanilla => "pooled_half",
            },
            Estimator::BlindPooled { .. } => "blind_pooled",
            Estimator::Truncated { .. } => "truncated",
            Estimator::PopulationPooled => "population_pooled",
        };
        f.write_str(base)?;
        if self.finetuned() {
            f.write_str("_finetuned")?;
        }
        Ok(())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, finetuned) = match s.strip_suffix("_finetuned") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let est = match base {
            "vanilla" if !finetuned => Estimator::Vanilla,
            "population_pooled" if !finetuned => Estimator::PopulationPooled,
            "pooled_cv" => Estimator::Pooled {
                policy: LambdaPolicy::Cv,
                finetuned,
            },
            "pooled_strong" => Estimator::Pooled {
                policy: LambdaPolicy::Stronger,
                finetuned,
            },
            "pooled_half" => Estimator::Pooled {
                policy: LambdaPolicy::HalfVanilla,
                finetuned,
            },
            "blind_pooled" => Estimator::BlindPooled { finetuned },
            "truncated" => Estimator::Truncated { finetuned },
            _ => return Err(Error::invalid(format!("unknown estimator '{s}'"))),
        };
        Ok(est)
    }
}

impl Serialize for Estimator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Estimator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How the selection grid is scored: held-out target loss, or an oracle
/// error against the true target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridScore {
    /// Criterion on one fifth of the target held out from the fits.
    #[default]
    Validation,
    L1,
    L2,
    Nuclear,
    Frobenius,
}

impl GridScore {
    fn oracle(self, m: &ErrorMetrics) -> f64 {
        match self {
            GridScore::L1 | GridScore::Validation => m.l1,
            GridScore::L2 => m.l2,
            GridScore::Nuclear => m.nuclear.unwrap_or(m.l1),
            GridScore::Frobenius => m.frobenius.unwrap_or(m.l2),
        }
    }
}

/// `lambda_Q` candidates are multiples of the vanilla penalty, `tau`
/// candidates multiples of the median initial contrast norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionGrid {
    pub lambda_q_factors: Vec<f64>,
    pub tau_factors: Vec<f64>,
    #[serde(default)]
    pub score: GridScore,
}

impl Default for SelectionGrid {
    fn default() -> Self {
        SelectionGrid {
            lambda_q_factors: vec![0.25, 0.5, 1.0, 2.0],
            tau_factors: vec![0.4, 0.6, 0.8, 1.0],
            score: GridScore::Validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    /// Penalty policy for the blind pooled and truncated estimators.
    pub primal_policy: LambdaPolicy,
    pub criterion: Criterion,
    pub selection: SelectionGrid,
    pub solver: SolverOptions,
    /// Record wall time per estimator (makes output run-dependent).
    pub timing: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            primal_policy: LambdaPolicy::HalfVanilla,
            criterion: Criterion::Deviance,
            selection: SelectionGrid::default(),
            solver: SolverOptions::default(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedScenario {
    pub id: String,
    pub scenario: ScenarioConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub scale: Scale,
    pub scenarios: Vec<NamedScenario>,
    pub estimators: Vec<Estimator>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub settings: ExperimentSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications must be >= 1"));
        }
        if self.scenarios.is_empty() || self.estimators.is_empty() {
            return Err(Error::invalid("need at least one scenario and one estimator"));
        }
        for s in &self.scenarios {
            s.scenario.validate()?;
        }
        self.settings.solver.validate()?;
        let g = &self.settings.selection;
        if g.lambda_q_factors.is_empty() || g.tau_factors.is_empty() {
            return Err(Error::invalid("selection grid factors must be nonempty"));
        }
        if g.lambda_q_factors.iter().chain(&g.tau_factors).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("selection grid factors must be finite and >= 0"));
        }
        if g.tau_factors.contains(&0.0) {
            return Err(Error::invalid("tau factors must be positive"));
        }
        Ok(())
    }
}

/// One estimator on one replication; the CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub scenario: String,
    pub seed: u64,
    pub estimator: String,
    pub err_l1: f64,
    pub err_l2: f64,
    pub err_nuc: Option<f64>,
    pub err_fro: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub seconds: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "scenario", "seed", "estimator", "err_l1", "err_l2", "err_nuc", "err_fro", "tpr", "tnr", "seconds",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(count)`; 0 for a single value.
    pub se: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Some(Summary { mean, se })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub scenario: String,
    pub estimator: String,
    pub count: usize,
    pub err_l1: Option<Summary>,
    pub err_l2: Option<Summary>,
    pub err_nuc: Option<Summary>,
    pub err_fro: Option<Summary>,
    pub tpr: Option<Summary>,
    pub tnr: Option<Summary>,
    /// Natural log of the squared l2 error.
    pub log_sq_l2: Option<Summary>,
}

/// Mean and standard error per (scenario, estimator), in first-seen order.
pub fn aggregate(records: &[Record]) -> Vec<Aggregate> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<&Record>> = HashMap::new();
    for r in records {
        let key = (r.scenario.clone(), r.estimator.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let col = |f: &dyn Fn(&Record) -> Option<f64>| -> Option<Summary> {
                Summary::of(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            Aggregate {
                count: rs.len(),
                err_l1: col(&|r| Some(r.err_l1)),
                err_l2: col(&|r| Some(r.err_l2)),
                err_nuc: col(&|r| r.err_nuc),
                err_fro: col(&|r| r.err_fro),
                tpr: col(&|r| r.tpr),
                tnr: col(&|r| r.tnr),
                log_sq_l2: col(&|r| (r.err_l2 > 0.0).then(|| (r.err_l2 * r.err_l2).ln())),
                scenario: key.0,
                estimator: key.1,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub scenario: String,
    pub rep: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub preset: String,
    pub scale: Scale,
    pub seed: u64,
    pub replications: usize,
    pub records: Vec<Record>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<Failure>,
    pub metadata: BTreeMap<String, String>,
}

/// Per-replication cache of tuned penalties and fitted primals.
struct Replication<'a> {
    id: &'a str,
    study: GeneratedStudy,
    r: Regularizer,
    settings: &'a ExperimentSettings,
    seed: u64,
    lambda_v: Option<f64>,
    lambda_cv_oracle: Option<f64>,
    lambda_cv_all: Option<f64>,
    primals: HashMap<Estimator, (Parameter, Option<Vec<bool>>)>,
}

const SEED_VANILLA: u64 = 0x7661;
const SEED_POOLED: u64 = 0x706f;
const SEED_BLIND: u64 = 0x626c;
const SEED_FINETUNE: u64 = 0x6674;
const SEED_SELECT: u64 = 0x7365;
const VALIDATION_FOLDS: usize = 5;

impl<'a> Replication<'a> {
    fn oracle_set(&self) -> Vec<Dataset> {
        let ds = &self.study.datasets;
        let mut out = vec![ds[0].clone()];
        for (k, &inf) in self.study.true_informative.iter().enumerate() {
            if inf {
                out.push(ds[k + 1].clone());
            }
        }
        out
    }

    fn opts(&self) -> &SolverOptions {
        &self.settings.solver
    }

    fn lambda_v(&mut self) -> Result<f64> {
        if let Some(l) = self.lambda_v {
            return Ok(l);
        }
        let cv = cv_vanilla(&self.study.datasets[0], self.r, self.settings.criterion, self.seed ^ SEED_VANILLA, self.opts())?;
        self.lambda_v = Some(cv.lambda);
        Ok(cv.lambda)
    }

    fn policy_lambda(&mut self, policy: LambdaPolicy, oracle: bool) -> Result<f64> {
        let lv = self.lambda_v()?;
        let pooled = if policy.needs_pooled_cv() {
            let cached = if oracle { self.lambda_cv_oracle } else { self.lambda_cv_all };
            match cached {
                Some(l) => l,
                None => {
                    let (set, salt) = if oracle {
                        (self.oracle_set(), SEED_POOLED)
                    } else {
                        (self.study.datasets.clone(), SEED_BLIND)
                    };
                    let l = cv_pooled(&set, self.r, self.settings.criterion, self.seed ^ salt, self.opts())?.lambda;
                    if oracle {
                        self.lambda_cv_oracle = Some(l);
                    } else {
                        self.lambda_cv_all = Some(l);
                    }
                    l
                }
            }
        } else {
            0.0
        };
        Ok(policy.apply(lv, pooled))
    }

    fn pooled(&self, set: &[Dataset], lambda: f64) -> Result<Parameter> {
        let refs: Vec<&Dataset> = set.iter().collect();
        Ok(pooled_fit(&refs, self.r, lambda, None, self.opts())?.0)
    }

    fn primal(&mut self, est: Estimator) -> Result<(Parameter, Option<Vec<bool>>)> {
        let key = est.primal();
        if let Some(hit) = self.primals.get(&key) {
            return Ok(hit.clone());
        }
        let k = self.study.true_informative.len();
        let out = match key {
            Estimator::Vanilla => {
                let l = self.lambda_v()?;
                (fit_dataset(&self.study.datasets[0], self.r, l, None, self.opts())?.param, None)
            }
            Estimator::Pooled { policy, .. } => {
                let l = self.policy_lambda(policy, true)?;
                let set = self.oracle_set();
                (self.pooled(&set, l)?, Some(self.study.true_informative.clone()))
            }
            Estimator::BlindPooled { .. } => {
                let l = self.policy_lambda(self.settings.primal_policy, false)?;
                let set = self.study.datasets.clone();
                (self.pooled(&set, l)?, Some(vec![true; k]))
            }
            Estimator::Truncated { .. } => self.truncated()?,
            Estimator::PopulationPooled => {
                let sigmas = self
                    .study
                    .covariances
                    .as_ref()
                    .ok_or_else(|| Error::UnsupportedModel("population pooling needs linear covariances".into()))?;
                let mut idx = vec![0];
                idx.extend((0..k).filter(|&j| self.study.true_informative[j]).map(|j| j + 1));
                let s: Vec<_> = idx.iter().map(|&i| sigmas[i].clone()).collect();
                let t: Vec<_> = idx.iter().map(|&i| self.study.true_coeffs[i].clone()).collect();
                let n: Vec<_> = idx.iter().map(|&i| self.study.datasets[i].n()).collect();
                (crate::datagen::population_pooled_linear(&s, &t, &n)?, None)
            }
        };
        self.primals.insert(key, out.clone());
        Ok(out)
    }

    fn truncated(&mut self) -> Result<(Parameter, Option<Vec<bool>>)> {
        let lv = self.lambda_v()?;
        let lp = self.policy_lambda(self.settings.primal_policy, false)?;
        let datasets = &self.study.datasets;
        let opts = &self.settings.solver;
        let init = initial_fits(datasets, self.r, lp, opts)?;
        let mut contrasts = init[1..]
            .iter()
            .map(|t| self.r.norm(&t.checked_sub(&init[0])?))
            .collect::<Result<Vec<f64>>>()?;
        contrasts.sort_by(f64::total_cmp);
        let m = contrasts.len();
        let median = if m % 2 == 1 {
            contrasts[m / 2]
        } else {
            0.5 * (contrasts[m / 2 - 1] + contrasts[m / 2])
        };
        let base_tau = if median > 0.0 { median } else { 1.0 };
        let grid = &self.settings.selection;
        let lq: Vec<f64> = grid.lambda_q_factors.iter().map(|f| f * lv).collect();
        let taus: Vec<f64> = grid.tau_factors.iter().map(|f| f * base_tau).collect();
        let truth = &self.study.true_coeffs[0];
        let k = datasets.len() - 1;
        let config = |l: f64, t: f64| {
            let mut cfg = SelectionConfig::new(lp, l, k, t, self.r);
            cfg.solver = *opts;
            cfg
        };
        if grid.score == GridScore::Validation {
            let folds = fold_partition(datasets[0].n(), VALIDATION_FOLDS, self.seed ^ SEED_SELECT)?;
            let held = &folds[0];
            let kept: Vec<usize> = folds[1..].iter().flatten().copied().collect();
            let mut train = datasets.clone();
            train[0] = datasets[0].subset(&kept)?;
            let test = datasets[0].subset(held)?;
            let train_init = initial_fits(&train, self.r, lp, opts)?;
            let criterion = self.settings.criterion;
            let choice = grid_select(&lq, &taus, |l, t| {
                let fit = dc_truncated(&train, &config(l, t), Some(&train_init))?;
                criterion.mean(&test, &fit.primal)
            })?;
            let fit = dc_truncated(datasets, &config(choice.lambda_q, choice.tau), Some(&init))?;
            return Ok((fit.primal, Some(fit.informative_flags)));
        }
        let mut fits: HashMap<(u64, u64), (Parameter, Vec<bool>)> = HashMap::new();
        let choice = grid_select(&lq, &taus, |l, t| {
            let fit = dc_truncated(datasets, &config(l, t), Some(&init))?;
            let score = grid.score.oracle(&error_metrics(&fit.primal, truth)?);
            fits.insert((l.to_bits(), t.to_bits()), (fit.primal, fit.informative_flags));
            Ok(score)
        })?;
        let (p, f) = fits
            .remove(&(choice.lambda_q.to_bits(), choice.tau.to_bits()))
            .expect("chosen cell was evaluated");
        Ok((p, Some(f)))
    }

    fn estimate(&mut self, est: Estimator) -> Result<(Parameter, Option<Vec<bool>>)> {
        let (primal, flags) = self.primal(est)?;
        if !est.finetuned() {
            return Ok((primal, flags));
        }
        let target = &self.study.datasets[0];
        let cv = cv_finetune(target, &primal, self.r, self.settings.criterion, self.seed ^ SEED_FINETUNE, self.opts())?;
        let fit = fine_tune_lagrangian_fit(target, &primal, cv.lambda, self.r, None, self.opts())?;
        Ok((fit.finetuned, flags))
    }
}

fn regularizer_for(cfg: &ScenarioConfig) -> Regularizer {
    if cfg.shape().is_matrix() {
        Regularizer::Nuclear
    } else {
        Regularizer::L1
    }
}

/// All estimator records of one replication generated from `seed`.
pub fn evaluate_replication(
    id: &str,
    scenario: &ScenarioConfig,
    estimators: &[Estimator],
    settings: &ExperimentSettings,
    seed: u64,
) -> Result<Vec<Record>> {
    let cfg = scenario.with_seed(seed);
    let study = generate(&cfg)?;
    let mut rep = Replication {
        id,
        r: regularizer_for(&cfg),
        study,
        settings,
        seed,
        lambda_v: None,
        lambda_cv_oracle: None,
        lambda_cv_all: None,
        primals: HashMap::new(),
    };
    let truth = rep.study.true_coeffs[0].clone();
    let mut out = Vec::with_capacity(estimators.len());
    for &est in estimators {
        let start = Instant::now();
        let (theta, flags) = rep.estimate(est)?;
        let seconds = settings.timing.then(|| start.elapsed().as_secs_f64());
        let m = error_metrics(&theta, &truth)?;
        let (tpr, tnr) = match flags {
            Some(f) => tpr_tnr(&f, &rep.study.true_informative)?,
            None => (None, None),
        };
        out.push(Record {
            scenario: rep.id.to_string(),
            seed,
            estimator: est.to_string(),
            err_l1: m.l1,
            err_l2: m.l2,
            err_nuc: m.nuclear,
            err_fro: m.frobenius,
            tpr,
            tnr,
            seconds,
        });
    }
    Ok(out)
}

/// Runs `reps` replications of one scenario on `parallelism` threads.
/// Replication `i` uses `replication_seed(master_seed, i)`; output order
/// and content do not depend on the thread count.
pub fn run_replications(
    scenario: &NamedScenario,
    estimators: &[Estimator],
    reps: usize,
    parallelism: usize,
    master_seed: u64,
    settings: &ExperimentSettings,
) -> Result<(Vec<Record>, Vec<Failure>)> {
    if reps == 0 {
        return Err(Error::invalid("replications must be >= 1"));
    }
    scenario.scenario.validate()?;
    let work = |i: usize| {
        let seed = replication_seed(master_seed, i as u64);
        (i, seed, evaluate_replication(&scenario.id, &scenario.scenario, estimators, settings, seed))
    };
    let results: Vec<_> = if parallelism <= 1 {
        (0..reps).map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| (0..reps).into_par_iter().map(work).collect())
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rep, seed, res) in results {
        match res {
            Ok(rs) => records.extend(rs),
            Err(e) => failures.push(Failure {
                scenario: scenario.id.clone(),
                rep,
                seed,
                message: e.to_string(),
            }),
        }
    }
    Ok((records, failures))
}

/// Runs every scenario of `cfg` and aggregates.
pub fn run_experiment(cfg: &ExperimentConfig, parallelism: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for s in &cfg.scenarios {
        let (r, f) = run_replications(s, &cfg.estimators, cfg.replications, parallelism, cfg.seed, &cfg.settings)?;
        records.extend(r);
        failures.extend(f);
    }
    Ok(ExperimentResult {
        preset: cfg.preset.clone(),
        scale: cfg.scale,
        seed: cfg.seed,
        replications: cfg.replications,
        aggregates: aggregate(&records),
        records,
        failures,
        metadata: metadata(cfg),
    })
}

fn metadata(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let scale = match cfg.scale {
        Scale::Full => "full",
        Scale::Desk => "desk",
    };
    m.insert("scale".into(), scale.into());
    m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    m.insert("log_sq_l2_base".into(), "e".into());
    m.insert("blind_pooled_flags".into(), "every source flagged informative".into());
    m.insert(
        "selection_grid".into(),
        format!(
            "lambda_q = {:?} x vanilla lambda, tau = {:?} x median initial contrast, scored by {:?}",
            cfg.settings.selection.lambda_q_factors, cfg.settings.selection.tau_factors, cfg.settings.selection.score
        ),
    );
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub scenario: String,
    /// Share of replications in which each estimator had the smallest l2 error.
    pub frequencies: BTreeMap<String, f64>,
    pub best: String,
}

/// Best-estimator frequencies per scenario among `estimators`; ties go to
/// the estimator listed first.
pub fn best_frequencies(records: &[Record], estimators: &[String]) -> Vec<FrequencyRow> {
    let mut scenarios: Vec<&str> = Vec::new();
    let mut by_rep: BTreeMap<(&str, u64), Vec<&Record>> = BTreeMap::new();
    for r in records {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
        by_rep.entry((&r.scenario, r.seed)).or_default().push(r);
    }
    scenarios
        .into_iter()
        .map(|sc| {
            let mut wins: BTreeMap<String, f64> = estimators.iter().map(|e| (e.clone(), 0.0)).collect();
            let mut reps = 0.0;
            for ((s, _), rs) in &by_rep {
                if *s != sc {
                    continue;
                }
                let mut best: Option<(&str, f64)> = None;
                for e in estimators {
                    if let Some(r) = rs.iter().find(|r| &r.estimator == e) {
                        if best.is_none_or(|(_, v)| r.err_l2 < v) {
                            best = Some((e, r.err_l2));
                        }
                    }
                }
                if let Some((e, _)) = best {
                    *wins.get_mut(e).expect("listed") += 1.0;
                    reps += 1.0;
                }
            }
            if reps > 0.0 {
                for v in wins.values_mut() {
                    *v /= reps;
                }
            }
            let best = estimators
                .iter()
                .fold(None::<(&String, f64)>, |acc, e| match acc {
                    Some((_, v)) if wins[e] <= v => acc,
                    _ => Some((e, wins[e])),
                })
                .map(|(e, _)| e.clone())
                .unwrap_or_default();
            FrequencyRow {
                scenario: sc.to_string(),
                frequencies: wins,
                best,
            }
        })
        .collect()
}

/// `points` log-spaced contrast levels from `lo` to `hi`.
pub fn log_h_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || points < 2 {
        return Err(Error::invalid("h grid needs 0 < lo < hi and at least 2 points"));
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..points)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64))
        .collect())
}

/// Scenario id used for contrast level `h`.
pub fn h_scenario_id(h: f64) -> String {
    format!("log10h={:.3}", h.log10())
}

/// One scenario per contrast level, sharing the template otherwise.
pub fn h_sweep_scenarios(template: &ScenarioConfig, hs: &[f64]) -> Vec<NamedScenario> {
    hs.iter()
        .map(|&h| NamedScenario {
            id: h_scenario_id(h),
            scenario: ScenarioConfig {
                contrast_level: h,
                ..template.clone()
            },
        })
        .collect()
}

/// Runs the estimators over the h grid and tabulates how often each is best.
pub fn h_sweep(
    template: &ScenarioConfig,
    hs: &[f64],
    estimators: &[Estimator],
    reps: usize,
    parallelism: usize,
    seed: u64,
    settings: &ExperimentSettings,
) -> Result<(Vec<Record>, Vec<FrequencyRow>)> {
    let mut records = Vec::new();
    for s in h_sweep_scenarios(template, hs) {
        let (r, f) = run_replications(&s, estimators, reps, parallelism, seed, settings)?;
        if let Some(first) = f.first() {
            return Err(Error::Numerical(format!("replication {} of {} failed: {}", first.rep, first.scenario, first.message)));
        }
        records.extend(r);
    }
    let names: Vec<String> = estimators.iter().map(|e| e.to_string()).collect();
    let table = best_frequencies(&records, &names);
    Ok((records, table))
}

// ------------------------------------------------------------------ presets

pub const PRESETS: [&str; 11] = [
    "table1", "table1-desk", "table2", "table2-desk", "table3", "table3-desk", "table4", "table4-desk", "fig3",
    "fig3-desk", "rate",
];

fn est(names: &[&str]) -> Vec<Estimator> {
    names.iter().map(|n| n.parse().expect("registry name")).collect()
}

fn vector_scenario(design: Design, family: CoeffFamily, p: usize, s: usize, sizes: Vec<usize>, informative: usize) -> ScenarioConfig {
    ScenarioConfig {
        design,
        coeff_family: family,
        dims: Dims::Vector { p, s },
        sample_sizes: sizes,
        contrast_level: 0.0,
        informative_count: informative,
        family: LossFamily::SquaredIdentity,
        seed: 0,
    }
}

fn sizes(n0: usize, nk: usize, k: usize) -> Vec<usize> {
    let mut v = vec![n0];
    v.extend(std::iter::repeat_n(nk, k));
    v
}

/// Named experiment configurations; `-desk` variants are reduced in size.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (base, desk) = match name.strip_suffix("-desk") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let scale = if desk { Scale::Desk } else { Scale::Full };
    let four_designs = |p: usize, n0: usize, nk: usize, k: usize, informative: usize| -> Vec<NamedScenario> {
        let s = (p as f64 * 0.04).round() as usize;
        [
            ("homo+l0", Design::HomoIdentity, CoeffFamily::L0Sparse),
            ("hetero+l0", Design::HeteroWishart, CoeffFamily::L0Sparse),
            ("homo+l1", Design::HomoIdentity, CoeffFamily::L1Laplace),
            ("hetero+l1", Design::HeteroWishart, CoeffFamily::L1Laplace),
        ]
        .into_iter()
        .map(|(id, d, f)| NamedScenario {
            id: id.into(),
            scenario: vector_scenario(d, f, p, s, sizes(n0, nk, k), informative),
        })
        .collect()
    };
    let cfg = match base {
        "table1" => {
            let (p, n0, nk, reps) = if desk { (100, 50, 100, 20) } else { (500, 250, 500, 100) };
            ExperimentConfig {
                preset: name.into(),
                scale,
                scenarios: four_designs(p, n0, nk, 5, 5),
                estimators: est(&[
                    "vanilla",
                    "pooled_cv",
                    "pooled_cv_finetuned",
                    "pooled_strong",
                    "pooled_strong_finetuned",
                    "population_pooled",
                ]),
                replications: reps,
                seed: 1,
                settings: ExperimentSettings::default(),
            }
        }
        "table2" => {
            let (p, n0, nk, reps) = if desk { (100, 50, 100, 20) } else { (500, 250, 500, 100) };
            ExperimentConfig {
                preset: name.into(),
                scale,
                scenarios: four_designs(p, n0, nk, 10, 5),
                estimators: est(&[
                    "blind_pooled",
                    "blind_pooled_finetuned",
                    "pooled_half",
                    "pooled_half_finetuned",
                    "truncated",
                    "truncated_finetuned",
                ]),
                replications: reps,
                seed: 2,
                settings: ExperimentSettings::default(),
            }
        }
        "table3" => {
            let (d, n, r, reps) = if desk { (10, 200, 2, 20) } else { (20, 400, 3, 100) };
            let scenarios = [("linear", LossFamily::SquaredIdentity), ("logit", LossFamily::LogisticLogit)]
                .into_iter()
                .map(|(id, family)| NamedScenario {
                    id: id.into(),
                    scenario: ScenarioConfig {
                        design: Design::HeteroWishart,
                        coeff_family: CoeffFamily::LowRankHaar,
                        dims: Dims::Matrix { d1: d, d2: d, r },
                        sample_sizes: vec![n; 5],
                        contrast_level: 0.0,
                        informative_count: 2,
                        family,
                        seed: 0,
                    },
                })
                .collect();
            ExperimentConfig {
                preset: name.into(),
                scale,
                scenarios,
                estimators: est(&[
                    "vanilla",
                    "blind_pooled",
                    "blind_pooled_finetuned",
                    "pooled_half",
                    "pooled_half_finetuned",
                    "truncated",
                    "truncated_finetuned",
                ]),
                replications: reps,
                seed: 3,
                settings: ExperimentSettings::default(),
            }
        }
        "table4" | "fig3" => {
            let (p, n, k, reps) = if desk { (200, 150, 6, 20) } else { (400, 300, 10, 100) };
            let s = (p as f64 * 0.03).round() as usize;
            let template = vector_scenario(Design::HeteroWishart, CoeffFamily::LaplaceContrast, p, s, vec![n; k + 1], k);
            ExperimentConfig {
                preset: name.into(),
                scale,
                scenarios: h_sweep_scenarios(&template, &log_h_grid(0.1, 10.0, 8)?),
                estimators: est(&[
                    "pooled_strong",
                    "pooled_strong_finetuned",
                    "truncated",
                    "truncated_finetuned",
                    "vanilla",
                ]),
                replications: reps,
                seed: 4,
                settings: ExperimentSettings::default(),
            }
        }
        "rate" if !desk => {
            let p = 200;
            let s = 6;
            let scenarios = [500usize, 1000, 2000, 4000]
                .into_iter()
                .map(|np| NamedScenario {
                    id: format!("n_pool={np}"),
                    scenario: vector_scenario(Design::HomoIdentity, CoeffFamily::LaplaceContrast, p, s, vec![np / 4; 4], 3),
                })
                .collect();
            ExperimentConfig {
                preset: name.into(),
                scale,
                scenarios,
                estimators: est(&["pooled_cv"]),
                replications: 20,
                seed: 5,
                settings: ExperimentSettings::default(),
            }
        }
        _ => {
            return Err(Error::invalid(format!(
                "unknown preset '{name}' (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}
