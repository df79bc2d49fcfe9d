//! GLM losses `L(theta) = sum_i w_i [-y_i eta_i + b(eta_i)]` with
//! `eta_i = <theta, X_i> + offset_i`.

use nalgebra::{DMatrix, DVector};

use super::{Dataset, LossFamily, Parameter, Shape};
use crate::error::{Error, Result};

/// Largest vectorized dimension for which a dense Hessian is built.
pub const HESSIAN_COORD_CAP: usize = 4096;

/// Average loss `(1/n) sum_i [-y_i <theta, X_i> + b(<theta, X_i>)]`.
pub fn glm_loss(d: &Dataset, theta: &Parameter) -> Result<f64> {
    GlmObjective::from_dataset(d).loss(theta)
}

/// Gradient `(1/n) sum_i [b'(eta_i) - y_i] X_i`, shaped like `theta`.
pub fn glm_gradient(d: &Dataset, theta: &Parameter) -> Result<Parameter> {
    GlmObjective::from_dataset(d).gradient(theta)
}

/// Dense Hessian `(1/n) sum_i b''(eta_i) vec(X_i) vec(X_i)^T`.
pub fn glm_hessian_vec(d: &Dataset, theta: &Parameter) -> Result<DMatrix<f64>> {
    glm_hessian_vec_capped(d, theta, HESSIAN_COORD_CAP)
}

pub fn glm_hessian_vec_capped(d: &Dataset, theta: &Parameter, cap: usize) -> Result<DMatrix<f64>> {
    GlmObjective::from_dataset(d).hessian(theta, cap)
}

/// A weighted (possibly pooled, possibly offset) GLM objective.
///
/// Single datasets use weights `1/n`; pooled objectives stack the rows of
/// several datasets with weights `alpha_k / n_P`.
#[derive(Debug, Clone)]
pub struct GlmObjective {
    shape: Shape,
    family: LossFamily,
    design: DMatrix<f64>,
    responses: DVector<f64>,
    weights: DVector<f64>,
    offset: Option<DVector<f64>>,
}

impl GlmObjective {
    pub fn from_dataset(d: &Dataset) -> Self {
        let n = d.n();
        GlmObjective {
            shape: d.shape(),
            family: d.family(),
            design: d.design().clone(),
            responses: d.responses().clone(),
            weights: DVector::from_element(n, 1.0 / n as f64),
            offset: None,
        }
    }

    /// `(1/n_P) sum_k alpha_k sum_i L_k(Z_ki; theta)` over the given datasets.
    pub fn pooled(datasets: &[&Dataset]) -> Result<Self> {
        let first = datasets.first().ok_or_else(|| Error::invalid("empty pool"))?;
        check_poolable(datasets)?;
        let n_total: usize = datasets.iter().map(|d| d.n()).sum();
        let q = first.shape().len();
        let mut design = DMatrix::zeros(n_total, q);
        let mut responses = DVector::zeros(n_total);
        let mut weights = DVector::zeros(n_total);
        let mut row = 0;
        for d in datasets {
            let n = d.n();
            design.rows_mut(row, n).copy_from(d.design());
            responses.rows_mut(row, n).copy_from(d.responses());
            weights.rows_mut(row, n).fill(d.weight() / n_total as f64);
            row += n;
        }
        Ok(GlmObjective {
            shape: first.shape(),
            family: first.family(),
            design,
            responses,
            weights,
            offset: None,
        })
    }

    /// Shift the linear predictor by `<base, X_i>`; the objective becomes a
    /// function of the correction `delta` in `base + delta`.
    pub fn with_base(mut self, base: &Parameter) -> Result<Self> {
        self.check(base)?;
        let shift = &self.design * base.to_dvector();
        self.offset = Some(match self.offset.take() {
            Some(o) => o + shift,
            None => shift,
        });
        Ok(self)
    }

    /// Multiply all row weights by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.weights *= factor;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn family(&self) -> LossFamily {
        self.family
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub(crate) fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub(crate) fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub(crate) fn offset(&self) -> Option<&DVector<f64>> {
        self.offset.as_ref()
    }

    fn check(&self, theta: &Parameter) -> Result<()> {
        if theta.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                found: theta.shape(),
            });
        }
        Ok(())
    }

    pub fn eta(&self, theta: &Parameter) -> Result<DVector<f64>> {
        self.check(theta)?;
        let mut eta = &self.design * theta.to_dvector();
        if let Some(o) = &self.offset {
            eta += o;
        }
        Ok(eta)
    }

    pub fn loss(&self, theta: &Parameter) -> Result<f64> {
        let eta = self.eta(theta)?;
        Ok(self.loss_at_eta(&eta))
    }

    pub(crate) fn loss_at_eta(&self, eta: &DVector<f64>) -> f64 {
        let f = self.family;
        eta.iter()
            .zip(self.responses.iter())
            .zip(self.weights.iter())
            .map(|((&e, &y), &w)| w * f.loss(y, e))
            .sum()
    }

    pub fn gradient(&self, theta: &Parameter) -> Result<Parameter> {
        let eta = self.eta(theta)?;
        Ok(Parameter::from_vec_shape(self.shape, &self.gradient_at_eta(&eta)))
    }

    pub(crate) fn gradient_at_eta(&self, eta: &DVector<f64>) -> DVector<f64> {
        let f = self.family;
        let r = DVector::from_iterator(
            eta.len(),
            eta.iter()
                .zip(self.responses.iter())
                .zip(self.weights.iter())
                .map(|((&e, &y), &w)| w * (f.mean(e) - y)),
        );
        self.design.tr_mul(&r)
    }

    pub fn hessian(&self, theta: &Parameter, cap: usize) -> Result<DMatrix<f64>> {
        let q = self.shape.len();
        if q > cap {
            return Err(Error::Capacity { coords: q, cap });
        }
        let eta = self.eta(theta)?;
        Ok(self.hessian_at_eta(&eta))
    }

    pub(crate) fn hessian_at_eta(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let f = self.family;
        let mut scaled = self.design.clone();
        for (i, (&e, &w)) in eta.iter().zip(self.weights.iter()).enumerate() {
            let s = (w * f.variance(e)).sqrt();
            scaled.row_mut(i).scale_mut(s);
        }
        let h = scaled.tr_mul(&scaled);
        // enforce exact symmetry
        (&h + h.transpose()) * 0.5
    }
}

pub(crate) fn check_poolable(datasets: &[&Dataset]) -> Result<()> {
    let first = datasets.first().ok_or_else(|| Error::invalid("empty pool"))?;
    for d in &datasets[1..] {
        if d.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.shape(),
                found: d.shape(),
            });
        }
        if d.family() != first.family() {
            return Err(Error::invalid(format!(
                "family mismatch in pool: {} vs {}",
                first.family(),
                d.family()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, shape: Shape, family: LossFamily) -> Dataset {
        let q = shape.len();
        let x = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| match family {
            LossFamily::SquaredIdentity => rng.sample::<f64, _>(StandardNormal),
            LossFamily::LogisticLogit => f64::from(rng.random_bool(0.5)),
        });
        Dataset::from_design(shape, x, y, family).unwrap()
    }

    fn random_param(rng: &mut ChaCha8Rng, shape: Shape) -> Parameter {
        let v = (0..shape.len()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        Parameter::from_column_major(shape, v).unwrap()
    }

    /// Direct per-observation summation, independent of the vectorized path.
    fn naive_loss(d: &Dataset, theta: &Parameter) -> f64 {
        let mut total = 0.0;
        for i in 0..d.n() {
            let x = d.covariate(i);
            let mut eta = 0.0;
            for (a, b) in x.as_slice().iter().zip(theta.as_slice()) {
                eta += a * b;
            }
            let y = d.responses()[i];
            let b = match d.family() {
                LossFamily::SquaredIdentity => eta * eta / 2.0,
                LossFamily::LogisticLogit => (1.0 + eta.exp()).ln(),
            };
            total += -y * eta + b;
        }
        total / d.n() as f64
    }

    #[test]
    fn squared_loss_at_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dataset(&mut rng, 10, Shape::Vector(3), LossFamily::SquaredIdentity);
        assert_eq!(glm_loss(&d, &Parameter::zeros(Shape::Vector(3))).unwrap(), 0.0);
    }

    #[test]
    fn logistic_loss_at_zero_is_log2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_dataset(&mut rng, 17, Shape::Matrix(2, 3), LossFamily::LogisticLogit);
        let l = glm_loss(&d, &Parameter::zeros(Shape::Matrix(2, 3))).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for family in [LossFamily::SquaredIdentity, LossFamily::LogisticLogit] {
            for shape in [Shape::Vector(5), Shape::Matrix(3, 2)] {
                let d = random_dataset(&mut rng, 12, shape, family);
                let t = random_param(&mut rng, shape);
                let a = glm_loss(&d, &t).unwrap();
                let b = naive_loss(&d, &t);
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_dataset(&mut rng, 20, Shape::Vector(4), LossFamily::SquaredIdentity);
        let theta = random_param(&mut rng, Shape::Vector(4));
        let y = d.linear_predictor(&theta).unwrap();
        let d = d.with_responses(y).unwrap();
        let g = glm_gradient(&d, &theta).unwrap();
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn logistic_gradient_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dataset(&mut rng, 9, Shape::Vector(3), LossFamily::LogisticLogit);
        let g = glm_gradient(&d, &Parameter::zeros(Shape::Vector(3))).unwrap();
        for j in 0..3 {
            let expect: f64 =
                (0..9).map(|i| (0.5 - d.responses()[i]) * d.design()[(i, j)]).sum::<f64>() / 9.0;
            assert!((g.as_slice()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn squared_hessian_is_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_dataset(&mut rng, 15, Shape::Vector(4), LossFamily::SquaredIdentity);
        let h = glm_hessian_vec(&d, &random_param(&mut rng, Shape::Vector(4))).unwrap();
        let gram = d.design().tr_mul(d.design()) / 15.0;
        assert!((h - gram).amax() < 1e-13);
    }

    #[test]
    fn logistic_single_sample_hessian_at_zero() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let d = Dataset::matrix(&[x.clone()], DVector::from_vec(vec![1.0]), LossFamily::LogisticLogit).unwrap();
        let h = glm_hessian_vec(&d, &Parameter::zeros(Shape::Matrix(2, 2))).unwrap();
        let v = DVector::from_column_slice(x.as_slice());
        let expect = &v * v.transpose() * 0.25;
        assert!((h - expect).amax() < 1e-15);
    }

    #[test]
    fn hessian_cap_enforced() {
        let d = Dataset::vector(DMatrix::zeros(1, 10), DVector::zeros(1), LossFamily::SquaredIdentity).unwrap();
        let r = glm_hessian_vec_capped(&d, &Parameter::zeros(Shape::Vector(10)), 9);
        assert!(matches!(r, Err(Error::Capacity { coords: 10, cap: 9 })));
    }

    #[test]
    fn pooled_requires_matching_shapes() {
        let a = Dataset::vector(DMatrix::zeros(2, 3), DVector::zeros(2), LossFamily::SquaredIdentity).unwrap();
        let b = Dataset::vector(DMatrix::zeros(2, 4), DVector::zeros(2), LossFamily::SquaredIdentity).unwrap();
        assert!(GlmObjective::pooled(&[&a, &b]).is_err());
        assert!(GlmObjective::pooled(&[]).is_err());
    }

    #[test]
    fn offset_shifts_linear_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_dataset(&mut rng, 8, Shape::Vector(3), LossFamily::LogisticLogit);
        let base = random_param(&mut rng, Shape::Vector(3));
        let delta = random_param(&mut rng, Shape::Vector(3));
        let shifted = GlmObjective::from_dataset(&d).with_base(&base).unwrap();
        let a = shifted.loss(&delta).unwrap();
        let b = glm_loss(&d, &base.checked_add(&delta).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

        #[test]
        fn gradient_matches_central_differences(seed in proptest::prelude::any::<u64>(), logit in proptest::prelude::any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let family = if logit { LossFamily::LogisticLogit } else { LossFamily::SquaredIdentity };
            let shape = Shape::Matrix(2, 3);
            let d = random_dataset(&mut rng, 15, shape, family);
            let theta = random_param(&mut rng, shape);
            let g = glm_gradient(&d, &theta).unwrap();
            let h = 1e-6;
            let mut fd = vec![0.0; shape.len()];
            for (j, slot) in fd.iter_mut().enumerate() {
                let mut plus = theta.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[j] += h;
                minus[j] -= h;
                let lp = glm_loss(&d, &Parameter::from_column_major(shape, plus).unwrap()).unwrap();
                let lm = glm_loss(&d, &Parameter::from_column_major(shape, minus).unwrap()).unwrap();
                *slot = (lp - lm) / (2.0 * h);
            }
            let diff: f64 = fd.iter().zip(g.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.l2_norm().max(1e-3);
            proptest::prop_assert!(diff / scale <= 1e-5, "relative error {}", diff / scale);
        }
    }
}
