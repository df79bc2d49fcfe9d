//! Seeded simulation designs: Gaussian, Wishart-type and GOE-perturbed
//! covariances, sparse and low-rank coefficient recipes, and linear or
//! logistic responses.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, LossFamily, Parameter, Shape};
use crate::solvers::PdFactor;

const STREAM_COEFFS: u64 = 1;
const STREAM_GOE: u64 = 2;
const STREAM_DATASET: u64 = 1 << 32;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, stream)`: a ChaCha key from the seed
/// and the stream selected by the counter.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of replication `rep` under `master`.
pub fn replication_seed(master: u64, rep: u64) -> u64 {
    splitmix(master ^ splitmix(rep.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Design {
    /// Independent standard normal covariates.
    HomoIdentity,
    /// `Sigma_k = c Lambda_k' Lambda_k` with a `1.5p x p` Gaussian `Lambda_k`;
    /// `c = 2/(3p)`, or `1/p` per side for matrix covariates with the identity link.
    HeteroWishart,
    /// `Sigma_0 = I`, `Sigma_1 = I + cZ`, `Sigma_2 = I - cZ` for one GOE draw `Z`.
    GoePerturbed { c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffFamily {
    /// `0.4` on the first `s` coordinates; sources move 3 (informative) or
    /// `2s` (non-informative) random coordinates and set the first to `-0.4`.
    L0Sparse,
    /// Laplace contrasts on `p/2` random coordinates, scale 0.04 (informative)
    /// or 0.2 (non-informative); first coordinate `-0.4`.
    L1Laplace,
    /// `0.5` on the first `s` coordinates; every source gets Laplace(0, 0.06h)
    /// contrasts on `p/2` coordinates and first coordinate `max(0.5 - 0.1h, -1)`.
    LaplaceContrast,
    /// Two sources with contrasts `+h e_1` and `-h e_1` around an `s`-sparse target.
    OpposedSpike,
    /// `theta_0 = U V'` of rank `r`; sources add `U_k V_k'/r + u v'` (informative)
    /// or `U_k V_k' + u v'` with `2r`-column Haar factors.
    LowRankHaar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Dims {
    Vector { p: usize, s: usize },
    Matrix { d1: usize, d2: usize, r: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub design: Design,
    pub coeff_family: CoeffFamily,
    pub dims: Dims,
    /// `n_0, n_1, .., n_K`.
    pub sample_sizes: Vec<usize>,
    /// Contrast level `h`; used by the recipes that are indexed by it.
    #[serde(default)]
    pub contrast_level: f64,
    /// Sources `1..=informative_count` are informative.
    pub informative_count: usize,
    pub family: LossFamily,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn sources(&self) -> usize {
        self.sample_sizes.len().saturating_sub(1)
    }

    pub fn shape(&self) -> Shape {
        match self.dims {
            Dims::Vector { p, .. } => Shape::Vector(p),
            Dims::Matrix { d1, d2, .. } => Shape::Matrix(d1, d2),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ScenarioConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(Error::invalid("sample_sizes must be nonempty with every size >= 1"));
        }
        if self.informative_count > self.sources() {
            return Err(Error::invalid(format!(
                "informative_count {} exceeds the {} sources",
                self.informative_count,
                self.sources()
            )));
        }
        if !(self.contrast_level.is_finite() && self.contrast_level >= 0.0) {
            return Err(Error::invalid(format!("contrast_level must be finite and >= 0, got {}", self.contrast_level)));
        }
        match (self.dims, self.coeff_family) {
            (Dims::Vector { p, s }, CoeffFamily::L0Sparse | CoeffFamily::L1Laplace | CoeffFamily::LaplaceContrast | CoeffFamily::OpposedSpike) => {
                if p == 0 || s > p {
                    return Err(Error::invalid(format!("need 1 <= p and s <= p, got p={p}, s={s}")));
                }
                if self.coeff_family == CoeffFamily::L0Sparse && 2 * s > p {
                    return Err(Error::invalid("l0 recipe needs 2s <= p"));
                }
                if self.family != LossFamily::SquaredIdentity {
                    return Err(Error::UnsupportedModel("vector designs use the squared loss".into()));
                }
            }
            (Dims::Matrix { d1, d2, r }, CoeffFamily::LowRankHaar) => {
                if d1 == 0 || d2 == 0 || r == 0 || 2 * r > d1.min(d2) {
                    return Err(Error::invalid(format!(
                        "low-rank recipe needs 1 <= r and 2r <= min(d1, d2), got {d1}x{d2}, r={r}"
                    )));
                }
            }
            (dims, fam) => {
                return Err(Error::invalid(format!("coefficient family {fam:?} does not fit dims {dims:?}")));
            }
        }
        if self.coeff_family == CoeffFamily::OpposedSpike && self.sources() != 2 {
            return Err(Error::invalid("opposed_spike needs exactly two sources"));
        }
        if let Design::GoePerturbed { c } = self.design {
            if self.sources() != 2 || self.shape().is_matrix() {
                return Err(Error::invalid("goe_perturbed needs vector covariates and exactly two sources"));
            }
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::invalid(format!("goe_perturbed c must be finite and >= 0, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStudy {
    /// Target first, then the sources.
    pub datasets: Vec<Dataset>,
    pub true_coeffs: Vec<Parameter>,
    pub true_informative: Vec<bool>,
    /// Population covariance of `vec(X)` per dataset, for the identity link.
    pub covariances: Option<Vec<DMatrix<f64>>>,
}

/// Symmetric matrix with `N(0, 2/p)` diagonal and `N(0, 1/p)` off-diagonal entries.
pub fn gen_goe(p: usize, seed: u64) -> DMatrix<f64> {
    goe_from(p, &mut substream(seed, STREAM_GOE))
}

fn goe_from(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let pf = p as f64;
    let mut z = DMatrix::zeros(p, p);
    for j in 0..p {
        z[(j, j)] = rng.sample::<f64, _>(StandardNormal) * (2.0 / pf).sqrt();
        for i in (j + 1)..p {
            let v = rng.sample::<f64, _>(StandardNormal) / pf.sqrt();
            z[(i, j)] = v;
            z[(j, i)] = v;
        }
    }
    z
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let a: f64 = rng.sample(Exp1);
    let b: f64 = rng.sample(Exp1);
    scale * (a - b)
}

/// `rows x cols` matrix with orthonormal columns, uniformly distributed.
pub fn haar_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let qr = gaussian(rng, rows, cols).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    loop {
        let v = gaussian(rng, n, 1);
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

/// Sparse-linear scenario (vector covariates, squared loss).
pub fn gen_linear_scenario(cfg: &ScenarioConfig) -> Result<GeneratedStudy> {
    cfg.validate()?;
    let Dims::Vector { p, s } = cfg.dims else {
        return Err(Error::invalid("linear scenario needs vector dims"));
    };
    let k_count = cfg.sources();
    let thetas = vector_coefficients(cfg, p, s);
    let scale = (2.0 / (3.0 * p as f64)).sqrt();
    let goe = match cfg.design {
        Design::GoePerturbed { .. } => Some(gen_goe(p, cfg.seed)),
        _ => None,
    };
    let mut datasets = Vec::with_capacity(k_count + 1);
    let mut covariances = Vec::with_capacity(k_count + 1);
    for (k, &n) in cfg.sample_sizes.iter().enumerate() {
        let mut rng = substream(cfg.seed, STREAM_DATASET + k as u64);
        let (x, sigma) = match cfg.design {
            Design::HomoIdentity => (gaussian(&mut rng, n, p), DMatrix::identity(p, p)),
            Design::HeteroWishart => {
                let lam = gaussian(&mut rng, p + p / 2, p) * scale;
                let z = gaussian(&mut rng, n, lam.nrows());
                (z * &lam, lam.tr_mul(&lam))
            }
            Design::GoePerturbed { c } => {
                let z = goe.as_ref().expect("goe drawn");
                let sign = [0.0, 1.0, -1.0][k];
                let sigma = DMatrix::identity(p, p) + z * (sign * c);
                let chol = sigma
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numerical(format!("perturbed covariance {k} is not positive definite")))?;
                (gaussian(&mut rng, n, p) * chol.l().transpose(), sigma)
            }
        };
        let y = &x * thetas[k].to_dvector() + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        datasets.push(Dataset::vector(x, y, LossFamily::SquaredIdentity)?);
        covariances.push(sigma);
    }
    Ok(GeneratedStudy {
        datasets,
        true_coeffs: thetas,
        true_informative: informative_labels(cfg),
        covariances: Some(covariances),
    })
}

fn informative_labels(cfg: &ScenarioConfig) -> Vec<bool> {
    (1..=cfg.sources()).map(|k| k <= cfg.informative_count).collect()
}

fn vector_coefficients(cfg: &ScenarioConfig, p: usize, s: usize) -> Vec<Parameter> {
    let mut rng = substream(cfg.seed, STREAM_COEFFS);
    let h = cfg.contrast_level;
    let signal = if cfg.coeff_family == CoeffFamily::LaplaceContrast { 0.5 } else { 0.4 };
    let mut target = DVector::zeros(p);
    target.rows_mut(0, s).fill(signal);
    let mut thetas = vec![target.clone()];
    for k in 1..=cfg.sources() {
        let informative = k <= cfg.informative_count;
        let mut theta = target.clone();
        match cfg.coeff_family {
            CoeffFamily::L0Sparse => {
                let (size, shift) = if informative { (3, 0.4) } else { (2 * s, 0.6) };
                for j in sample(&mut rng, p, size) {
                    if j != 0 {
                        theta[j] -= shift;
                    }
                }
                theta[0] = -0.4;
            }
            CoeffFamily::L1Laplace => {
                let b = if informative { 0.04 } else { 0.2 };
                for j in sample(&mut rng, p, p / 2) {
                    theta[j] += laplace(&mut rng, b);
                }
                theta[0] = -0.4;
            }
            CoeffFamily::LaplaceContrast => {
                for j in sample(&mut rng, p, p / 2) {
                    if j != 0 {
                        theta[j] += laplace(&mut rng, 0.06 * h);
                    }
                }
                theta[0] = (0.5 - 0.1 * h).max(-1.0);
            }
            CoeffFamily::OpposedSpike => {
                theta[0] += if k == 1 { -h } else { h };
            }
            CoeffFamily::LowRankHaar => unreachable!("validated"),
        }
        thetas.push(theta);
    }
    thetas.iter().map(|t| Parameter::from_vec_shape(Shape::Vector(p), t)).collect()
}

/// Low-rank trace regression scenario (matrix covariates, identity or logit link).
pub fn gen_trace_scenario(cfg: &ScenarioConfig) -> Result<GeneratedStudy> {
    cfg.validate()?;
    let Dims::Matrix { d1, d2, r } = cfg.dims else {
        return Err(Error::invalid("trace scenario needs matrix dims"));
    };
    let shape = Shape::Matrix(d1, d2);
    let mut rng = substream(cfg.seed, STREAM_COEFFS);
    let target = haar_columns(&mut rng, d1, r) * haar_columns(&mut rng, d2, r).transpose();
    let mut thetas = vec![target.clone()];
    for k in 1..=cfg.sources() {
        let uk = haar_columns(&mut rng, d1, 2 * r);
        let vk = haar_columns(&mut rng, d2, 2 * r);
        let u = unit_vector(&mut rng, d1);
        let v = unit_vector(&mut rng, d2);
        let mut spread = uk * vk.transpose();
        if k <= cfg.informative_count {
            spread /= r as f64;
        }
        thetas.push(&target + spread + u * v.transpose());
    }

    let side_scale = |d: usize| match cfg.family {
        LossFamily::SquaredIdentity => 1.0 / d as f64,
        LossFamily::LogisticLogit => 2.0 / (3.0 * d as f64),
    };
    let q = d1 * d2;
    let mut datasets = Vec::with_capacity(thetas.len());
    let mut covariances = Vec::with_capacity(thetas.len());
    for (k, &n) in cfg.sample_sizes.iter().enumerate() {
        let mut rng = substream(cfg.seed, STREAM_DATASET + k as u64);
        // X = A Z B' with A A' = Sigma_1, B B' = Sigma_2
        let (a, b) = match cfg.design {
            Design::HeteroWishart => {
                let lam = gaussian(&mut rng, d1 + d1 / 2, d1) * side_scale(d1).sqrt();
                let om = gaussian(&mut rng, d2 + d2 / 2, d2) * side_scale(d2).sqrt();
                (lam.transpose(), om.transpose())
            }
            Design::HomoIdentity => (DMatrix::identity(d1, d1), DMatrix::identity(d2, d2)),
            Design::GoePerturbed { .. } => unreachable!("validated"),
        };
        let theta_vec = DVector::from_column_slice(thetas[k].as_slice());
        let mut design = DMatrix::zeros(n, q);
        for i in 0..n {
            let z = gaussian(&mut rng, a.ncols(), b.ncols());
            let x = &a * z * b.transpose();
            for (j, v) in x.as_slice().iter().enumerate() {
                design[(i, j)] = *v;
            }
        }
        let eta = &design * &theta_vec;
        let y = match cfg.family {
            LossFamily::SquaredIdentity => eta.map(|e| e + rng.sample::<f64, _>(StandardNormal)),
            LossFamily::LogisticLogit => eta.map(|e| f64::from(rng.random::<f64>() < cfg.family.mean(e))),
        };
        datasets.push(Dataset::from_design(shape, design, y, cfg.family)?);
        if cfg.family == LossFamily::SquaredIdentity {
            covariances.push((&b * b.transpose()).kronecker(&(&a * a.transpose())));
        }
    }
    Ok(GeneratedStudy {
        datasets,
        true_coeffs: thetas.into_iter().map(|t| Parameter::from_raw(shape, t)).collect(),
        true_informative: informative_labels(cfg),
        covariances: (cfg.family == LossFamily::SquaredIdentity).then_some(covariances),
    })
}

/// Dispatch on the dimensions.
pub fn generate(cfg: &ScenarioConfig) -> Result<GeneratedStudy> {
    match cfg.dims {
        Dims::Vector { .. } => gen_linear_scenario(cfg),
        Dims::Matrix { .. } => gen_trace_scenario(cfg),
    }
}

/// Minimizer of `sum_k n_k E(y - <theta, X_k>)^2`:
/// `(sum n_k Sigma_k)^{-1} sum n_k Sigma_k theta_k`.
pub fn population_pooled_linear(sigmas: &[DMatrix<f64>], thetas: &[Parameter], ns: &[usize]) -> Result<Parameter> {
    if sigmas.is_empty() || sigmas.len() != thetas.len() || sigmas.len() != ns.len() {
        return Err(Error::invalid(format!(
            "{} covariances, {} parameters and {} sizes",
            sigmas.len(),
            thetas.len(),
            ns.len()
        )));
    }
    let shape = thetas[0].shape();
    let q = shape.len();
    let mut total = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for ((s, t), &n) in sigmas.iter().zip(thetas).zip(ns) {
        if s.shape() != (q, q) {
            return Err(Error::invalid(format!("covariance is {}x{}, expected {q}x{q}", s.nrows(), s.ncols())));
        }
        thetas[0].check_same_shape(t)?;
        let w = n as f64;
        total += s * w;
        rhs += s * t.to_dvector() * w;
    }
    let factor = PdFactor::new(&total).map_err(|_| Error::Numerical("aggregate covariance is singular".into()))?;
    Ok(Parameter::from_vec_shape(shape, &factor.solve(&rhs)?))
}
