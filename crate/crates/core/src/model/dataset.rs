use nalgebra::{DMatrix, DVector};

use super::{param::check_finite, LossFamily, Parameter, Shape};
use crate::error::{Error, Result};

/// One study: covariates, responses, pooling weight and loss family.
///
/// Covariates are held as an `n x q` design whose `i`-th row is
/// `vec(X_i)`, so `<theta, X_i>` is a row-vector product for both the
/// vector and the matrix (trace regression) cases.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    design: DMatrix<f64>,
    responses: DVector<f64>,
    weight: f64,
    family: LossFamily,
}

impl Dataset {
    /// Vector-covariate dataset from an `n x p` design.
    pub fn vector(design: DMatrix<f64>, responses: DVector<f64>, family: LossFamily) -> Result<Self> {
        let shape = Shape::Vector(design.ncols());
        Self::from_design(shape, design, responses, family)
    }

    /// Matrix-covariate dataset from `n` matrices of identical shape.
    pub fn matrix(covariates: &[DMatrix<f64>], responses: DVector<f64>, family: LossFamily) -> Result<Self> {
        let first = covariates
            .first()
            .ok_or_else(|| Error::invalid("dataset needs at least one observation"))?;
        let (d1, d2) = first.shape();
        let q = d1 * d2;
        let mut design = DMatrix::zeros(covariates.len(), q);
        for (i, x) in covariates.iter().enumerate() {
            if x.shape() != (d1, d2) {
                return Err(Error::ShapeMismatch {
                    expected: Shape::Matrix(d1, d2),
                    found: Shape::Matrix(x.nrows(), x.ncols()),
                });
            }
            for (j, v) in x.as_slice().iter().enumerate() {
                design[(i, j)] = *v;
            }
        }
        Self::from_design(Shape::Matrix(d1, d2), design, responses, family)
    }

    /// General constructor from a vectorized design.
    pub fn from_design(
        shape: Shape,
        design: DMatrix<f64>,
        responses: DVector<f64>,
        family: LossFamily,
    ) -> Result<Self> {
        let n = design.nrows();
        if n == 0 {
            return Err(Error::invalid("dataset needs at least one observation"));
        }
        if responses.len() != n {
            return Err(Error::invalid(format!(
                "{} responses for {n} covariate rows",
                responses.len()
            )));
        }
        if design.ncols() != shape.len() {
            return Err(Error::invalid(format!(
                "design has {} columns but shape {shape} needs {}",
                design.ncols(),
                shape.len()
            )));
        }
        check_finite(design.as_slice())?;
        check_finite(responses.as_slice())?;
        if let Some(i) = responses.iter().position(|&y| !family.accepts_response(y)) {
            return Err(Error::invalid(format!(
                "response {} at row {i} is not valid for {family}",
                responses[i]
            )));
        }
        Ok(Dataset {
            shape,
            design,
            responses,
            weight: 1.0,
            family,
        })
    }

    /// Set the pooling weight `alpha_k` (default 1).
    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::invalid(format!("weight must be finite and >= 0, got {weight}")));
        }
        self.weight = weight;
        Ok(self)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn family(&self) -> LossFamily {
        self.family
    }

    /// The `i`-th covariate as a parameter-shaped object.
    pub fn covariate(&self, i: usize) -> Parameter {
        let row: Vec<f64> = self.design.row(i).iter().copied().collect();
        let (r, c) = self.shape.dims();
        Parameter::from_raw(self.shape, DMatrix::from_vec(r, c, row))
    }

    /// Linear predictor `eta_i = <theta, X_i>`.
    pub fn linear_predictor(&self, theta: &Parameter) -> Result<DVector<f64>> {
        self.check_param(theta)?;
        Ok(&self.design * theta.to_dvector())
    }

    pub fn check_param(&self, theta: &Parameter) -> Result<()> {
        if theta.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                found: theta.shape(),
            });
        }
        Ok(())
    }

    /// Rows `idx` as a new dataset with the same weight and family.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let n = self.n();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("row {bad} out of range for n={n}")));
        }
        let design = self.design.select_rows(idx.iter());
        let responses = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.responses[i]));
        Ok(Dataset {
            shape: self.shape,
            design,
            responses,
            weight: self.weight,
            family: self.family,
        })
    }

    /// Same covariates with responses replaced.
    pub fn with_responses(&self, responses: DVector<f64>) -> Result<Dataset> {
        Dataset::from_design(self.shape, self.design.clone(), responses, self.family)?.with_weight(self.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_logit_response() {
        let x = DMatrix::from_element(2, 2, 1.0);
        let y = DVector::from_vec(vec![0.0, 0.5]);
        assert!(Dataset::vector(x, y, LossFamily::LogisticLogit).is_err());
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let x = DMatrix::<f64>::zeros(0, 3);
        assert!(Dataset::vector(x, DVector::zeros(0), LossFamily::SquaredIdentity).is_err());
        let x = DMatrix::<f64>::zeros(3, 3);
        assert!(Dataset::vector(x, DVector::zeros(2), LossFamily::SquaredIdentity).is_err());
    }

    #[test]
    fn matrix_covariates_vectorize_column_major() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let d = Dataset::matrix(&[a.clone()], DVector::from_vec(vec![1.0]), LossFamily::SquaredIdentity).unwrap();
        assert_eq!(d.shape(), Shape::Matrix(2, 2));
        assert_eq!(d.covariate(0).as_matrix(), &a);
        let theta = Parameter::from_matrix(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(d.linear_predictor(&theta).unwrap()[0], 5.0);
    }

    #[test]
    fn mixed_covariate_shapes_rejected() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 3);
        assert!(Dataset::matrix(&[a, b], DVector::zeros(2), LossFamily::SquaredIdentity).is_err());
    }

    #[test]
    fn negative_weight_rejected() {
        let d = Dataset::vector(DMatrix::zeros(1, 1), DVector::zeros(1), LossFamily::SquaredIdentity).unwrap();
        assert!(d.clone().with_weight(-1.0).is_err());
        assert_eq!(d.with_weight(2.5).unwrap().weight(), 2.5);
    }

    #[test]
    fn subset_picks_rows() {
        let x = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let y = DVector::from_fn(4, |i, _| i as f64);
        let d = Dataset::vector(x, y, LossFamily::SquaredIdentity).unwrap();
        let s = d.subset(&[3, 1]).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.responses()[0], 3.0);
        assert_eq!(s.design()[(1, 1)], 3.0);
        assert!(d.subset(&[4]).is_err());
    }
}
