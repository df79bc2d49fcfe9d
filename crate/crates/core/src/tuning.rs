//! K-fold cross-validation over penalty grids, exhaustive grid search for
//! the selection penalties, and the named penalty policies.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::substream;
use crate::error::{Error, Result};
use crate::model::glm::GlmObjective;
use crate::model::{Dataset, Parameter, Regularizer};
use crate::solvers::{fit_dataset, lambda_max_glm, SolverOptions};
use crate::transfer::{fine_tune_lagrangian_fit, pooled_fit};

/// Held-out score per observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `(y - b'(eta))^2`.
    PredictionError,
    /// Family deviance; equals the squared error for the identity link.
    #[default]
    Deviance,
}

impl Criterion {
    pub fn mean(self, d: &Dataset, theta: &Parameter) -> Result<f64> {
        let eta = d.linear_predictor(theta)?;
        let fam = d.family();
        let total: f64 = eta
            .iter()
            .zip(d.responses().iter())
            .map(|(&e, &y)| match self {
                Criterion::PredictionError => (y - fam.mean(e)).powi(2),
                Criterion::Deviance => fam.deviance(y, e),
            })
            .sum();
        Ok(total / d.n() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningGrid {
    /// Strictly increasing positive penalties.
    pub values: Vec<f64>,
    pub folds: usize,
    #[serde(default)]
    pub criterion: Criterion,
}

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_GRID_POINTS: usize = 50;
pub const DEFAULT_GRID_RATIO: f64 = 1e-3;

impl TuningGrid {
    pub fn new(values: Vec<f64>, folds: usize, criterion: Criterion) -> Result<Self> {
        let g = TuningGrid {
            values,
            folds,
            criterion,
        };
        g.validate()?;
        Ok(g)
    }

    /// `points` log-spaced values from `ratio * max` to `max`.
    pub fn log_spaced(max: f64, points: usize, ratio: f64, folds: usize, criterion: Criterion) -> Result<Self> {
        if !(max.is_finite() && max > 0.0) {
            return Err(Error::invalid(format!("grid maximum must be positive, got {max}")));
        }
        if points == 0 || !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid("need at least one point and a ratio in (0, 1)"));
        }
        let values = if points == 1 {
            vec![max]
        } else {
            let lo = (max * ratio).ln();
            let step = (max.ln() - lo) / (points - 1) as f64;
            (0..points).map(|i| (lo + step * i as f64).exp()).collect()
        };
        Self::new(values, folds, criterion)
    }

    /// The default 50-point grid below `lambda_max`.
    pub fn default_for(lambda_max: f64, criterion: Criterion) -> Result<Self> {
        Self::log_spaced(lambda_max, DEFAULT_GRID_POINTS, DEFAULT_GRID_RATIO, DEFAULT_FOLDS, criterion)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("tuning grid is empty"));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("tuning grid values must be finite and positive"));
        }
        if self.values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("tuning grid values must be strictly increasing"));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvOutcome {
    pub lambda: f64,
    pub index: usize,
    /// Mean held-out criterion per grid value, aligned with the grid.
    pub curve: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Seeded partition of `0..n` into `folds` disjoint, nearly equal parts.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::invalid(format!("need 2 <= folds <= n, got folds={folds}, n={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, 0xf01d));
    let mut parts = vec![Vec::with_capacity(n / folds + 1); folds];
    for (i, j) in idx.into_iter().enumerate() {
        parts[i % folds].push(j);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Cross-validates `fitter` on one dataset. The fitter receives the
/// training part, the penalty and a warm start from the next larger penalty.
pub fn cv_select<F>(d: &Dataset, fitter: F, grid: &TuningGrid, seed: u64) -> Result<CvOutcome>
where
    F: FnMut(&Dataset, f64, Option<&Parameter>) -> Result<Parameter>,
{
    let mut fitter = fitter;
    cv_select_multi(
        std::slice::from_ref(d),
        |train, lambda, warm| fitter(&train[0], lambda, warm),
        grid,
        seed,
    )
}

/// Cross-validation over several datasets at once: every dataset is split
/// into the same number of folds and fold `f` of all of them is held out
/// together; the criterion averages over all held-out observations.
pub fn cv_select_multi<F>(datasets: &[Dataset], mut fitter: F, grid: &TuningGrid, seed: u64) -> Result<CvOutcome>
where
    F: FnMut(&[Dataset], f64, Option<&Parameter>) -> Result<Parameter>,
{
    grid.validate()?;
    if datasets.is_empty() {
        return Err(Error::invalid("cross-validation needs at least one dataset"));
    }
    let partitions = datasets
        .iter()
        .enumerate()
        .map(|(k, d)| fold_partition(d.n(), grid.folds, seed.wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let m = grid.values.len();
    let mut scores = vec![Vec::with_capacity(grid.folds); m];
    for fold in 0..grid.folds {
        let mut train = Vec::with_capacity(datasets.len());
        let mut test = Vec::with_capacity(datasets.len());
        for (d, parts) in datasets.iter().zip(&partitions) {
            let held = &parts[fold];
            let kept: Vec<usize> = (0..d.n()).filter(|i| held.binary_search(i).is_err()).collect();
            train.push(d.subset(&kept)?);
            test.push(d.subset(held)?);
        }
        let held_total: f64 = test.iter().map(|t| t.n() as f64).sum();
        let mut warm: Option<Parameter> = None;
        for j in (0..m).rev() {
            let lambda = grid.values[j];
            let theta = fitter(&train, lambda, warm.as_ref()).map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })?;
            let mut total = 0.0;
            for t in &test {
                total += grid.criterion.mean(t, &theta)? * t.n() as f64;
            }
            let score = total / held_total;
            if !score.is_finite() {
                return Err(Error::Fold {
                    fold,
                    source: Box::new(Error::Numerical(format!("held-out criterion not finite at lambda {lambda}"))),
                });
            }
            scores[j].push(score);
            warm = Some(theta);
        }
    }
    let folds = grid.folds as f64;
    let curve: Vec<f64> = scores.iter().map(|s| s.iter().sum::<f64>() / folds).collect();
    let std_errors = scores
        .iter()
        .zip(&curve)
        .map(|(s, mean)| {
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (folds - 1.0);
            (var / folds).sqrt()
        })
        .collect();
    // ties go to the larger penalty
    let mut index = m - 1;
    for j in (0..m).rev() {
        if curve[j] < curve[index] {
            index = j;
        }
    }
    Ok(CvOutcome {
        lambda: grid.values[index],
        index,
        curve,
        std_errors,
    })
}

/// CV of the single-dataset penalized estimator on its default grid.
pub fn cv_vanilla(d: &Dataset, r: Regularizer, criterion: Criterion, seed: u64, opts: &SolverOptions) -> Result<CvOutcome> {
    let lmax = lambda_max_glm(&GlmObjective::from_dataset(d), r)?;
    let grid = TuningGrid::default_for(positive(lmax), criterion)?;
    cv_select(d, |train, lambda, warm| Ok(fit_dataset(train, r, lambda, warm, opts)?.param), &grid, seed)
}

/// CV of the pooled estimator over all pooled samples.
pub fn cv_pooled(datasets: &[Dataset], r: Regularizer, criterion: Criterion, seed: u64, opts: &SolverOptions) -> Result<CvOutcome> {
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let lmax = lambda_max_glm(&GlmObjective::pooled(&refs)?, r)?;
    let grid = TuningGrid::default_for(positive(lmax), criterion)?;
    cv_select_multi(
        datasets,
        |train, lambda, warm| {
            let refs: Vec<&Dataset> = train.iter().collect();
            Ok(pooled_fit(&refs, r, lambda, warm, opts)?.0)
        },
        &grid,
        seed,
    )
}

/// CV of the fine-tuning penalty on the target with the primal held fixed.
pub fn cv_finetune(
    target: &Dataset,
    primal: &Parameter,
    r: Regularizer,
    criterion: Criterion,
    seed: u64,
    opts: &SolverOptions,
) -> Result<CvOutcome> {
    let obj = GlmObjective::from_dataset(target).with_base(primal)?;
    let lmax = lambda_max_glm(&obj, r)?;
    let grid = TuningGrid::default_for(positive(lmax), criterion)?;
    cv_select(
        target,
        |train, zeta, warm| {
            let init = warm.map(|w| w.checked_sub(primal)).transpose()?;
            Ok(fine_tune_lagrangian_fit(train, primal, zeta, r, init.as_ref(), opts)?.finetuned)
        },
        &grid,
        seed,
    )
}

// a zero gradient at the origin still needs a usable grid
fn positive(lmax: f64) -> f64 {
    if lmax > 0.0 {
        lmax
    } else {
        f64::MIN_POSITIVE.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridChoice {
    pub lambda_q: f64,
    pub tau: f64,
    pub score: f64,
    /// `scores[i][j]` for `lambda_q[i]`, `tau[j]`.
    pub scores: Vec<Vec<f64>>,
}

/// Exhaustive search over `lambda_q x tau`; ties go to the larger `tau`,
/// then the larger `lambda_q`.
pub fn grid_select<F>(lambda_q: &[f64], tau: &[f64], mut score: F) -> Result<GridChoice>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    if lambda_q.is_empty() || tau.is_empty() {
        return Err(Error::invalid("grid search needs nonempty grids"));
    }
    let mut scores = vec![vec![f64::NAN; tau.len()]; lambda_q.len()];
    let mut best: Option<(f64, f64, f64)> = None;
    for (i, &lq) in lambda_q.iter().enumerate() {
        for (j, &t) in tau.iter().enumerate() {
            let s = score(lq, t)?;
            scores[i][j] = s;
            let better = match best {
                None => true,
                Some((bs, bl, bt)) => s < bs || (s == bs && (t > bt || (t == bt && lq > bl))),
            };
            if better && !s.is_nan() {
                best = Some((s, lq, t));
            }
        }
    }
    let (score, lambda_q, tau) = best.ok_or_else(|| Error::Numerical("every grid score is NaN".into()))?;
    Ok(GridChoice {
        lambda_q,
        tau,
        score,
        scores,
    })
}

/// How the pooling penalty is derived from the cross-validated ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaPolicy {
    /// The pooled CV choice itself.
    #[default]
    Cv,
    /// Pooled CV choice plus a quarter of the vanilla choice.
    Stronger,
    /// Half the vanilla choice.
    HalfVanilla,
}

impl LambdaPolicy {
    pub fn apply(self, lambda_vanilla: f64, lambda_pooled_cv: f64) -> f64 {
        match self {
            LambdaPolicy::Cv => lambda_pooled_cv,
            LambdaPolicy::Stronger => lambda_pooled_cv + 0.25 * lambda_vanilla,
            LambdaPolicy::HalfVanilla => 0.5 * lambda_vanilla,
        }
    }

    pub fn needs_pooled_cv(self) -> bool {
        !matches!(self, LambdaPolicy::HalfVanilla)
    }
}
