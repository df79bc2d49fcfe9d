use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a coefficient object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    /// Number of vectorized coordinates.
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(p) => p,
            Shape::Matrix(d1, d2) => d1 * d2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)` of the dense storage; vectors are stored as columns.
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            Shape::Vector(p) => (p, 1),
            Shape::Matrix(d1, d2) => (d1, d2),
        }
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self, Shape::Matrix(..))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Vector(p) => write!(f, "vector({p})"),
            Shape::Matrix(d1, d2) => write!(f, "matrix({d1}x{d2})"),
        }
    }
}

/// A coefficient object: a length-`p` vector or a `d1 x d2` matrix.
///
/// Values are stored densely in column-major order, so the vectorization
/// `vec(theta)` used by Hessians and designs is the raw storage order.
/// All entries are finite and the shape never changes after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    shape: Shape,
    values: DMatrix<f64>,
}

impl Parameter {
    pub fn zeros(shape: Shape) -> Self {
        let (r, c) = shape.dims();
        Parameter {
            shape,
            values: DMatrix::zeros(r, c),
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let p = values.len();
        Self::from_column_major(Shape::Vector(p), values)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.to_vec())
    }

    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let shape = Shape::Matrix(values.nrows(), values.ncols());
        check_finite(values.as_slice())?;
        Ok(Parameter { shape, values })
    }

    pub fn from_dvector(values: &DVector<f64>) -> Result<Self> {
        Self::from_vec(values.as_slice().to_vec())
    }

    /// Build from column-major values of the given shape.
    pub fn from_column_major(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::invalid(format!(
                "{} values supplied for shape {shape}",
                values.len()
            )));
        }
        check_finite(&values)?;
        let (r, c) = shape.dims();
        Ok(Parameter {
            shape,
            values: DMatrix::from_vec(r, c, values),
        })
    }

    /// Internal constructor for solver output; finiteness is checked in
    /// debug builds only.
    pub(crate) fn from_raw(shape: Shape, values: DMatrix<f64>) -> Self {
        debug_assert_eq!(shape.dims(), values.shape());
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite parameter");
        Parameter { shape, values }
    }

    pub(crate) fn from_vec_shape(shape: Shape, v: &DVector<f64>) -> Self {
        let (r, c) = shape.dims();
        Self::from_raw(shape, DMatrix::from_column_slice(r, c, v.as_slice()))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense storage (`p x 1` for vectors).
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Column-major values, i.e. `vec(theta)`.
    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.values.as_slice())
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    pub fn check_same_shape(&self, other: &Parameter) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                found: other.shape,
            });
        }
        Ok(())
    }

    /// Frobenius pairing `sum_ij a_ij b_ij`.
    pub fn dot(&self, other: &Parameter) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.values.dot(&other.values))
    }

    pub fn checked_add(&self, other: &Parameter) -> Result<Parameter> {
        self.check_same_shape(other)?;
        Ok(Parameter::from_raw(self.shape, &self.values + &other.values))
    }

    pub fn checked_sub(&self, other: &Parameter) -> Result<Parameter> {
        self.check_same_shape(other)?;
        Ok(Parameter::from_raw(self.shape, &self.values - &other.values))
    }

    pub fn scaled(&self, factor: f64) -> Parameter {
        Parameter::from_raw(self.shape, &self.values * factor)
    }

    /// Sum of absolute entries.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Euclidean (Frobenius for matrices) norm.
    pub fn l2_norm(&self) -> f64 {
        self.values.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Number of entries with `|v| > tol`.
    pub fn count_nonzero(&self, tol: f64) -> usize {
        self.values.iter().filter(|v| v.abs() > tol).count()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite entry {} at position {pos}",
            values[pos]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_roundtrip_and_norms() {
        let p = Parameter::from_vec(vec![3.0, -4.0, 0.0]).unwrap();
        assert_eq!(p.shape(), Shape::Vector(3));
        assert_eq!(p.l1_norm(), 7.0);
        assert_eq!(p.l2_norm(), 5.0);
        assert_eq!(p.count_nonzero(0.0), 2);
    }

    #[test]
    fn matrix_is_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = Parameter::from_matrix(m).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Parameter::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(Parameter::from_vec(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn mismatched_arithmetic_is_rejected() {
        let a = Parameter::zeros(Shape::Vector(4));
        let b = Parameter::zeros(Shape::Matrix(2, 2));
        assert!(matches!(a.checked_add(&b), Err(Error::ShapeMismatch { .. })));
        assert!(a.dot(&b).is_err());
        assert!(a.checked_sub(&Parameter::zeros(Shape::Vector(3))).is_err());
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(Parameter::from_column_major(Shape::Matrix(2, 3), vec![0.0; 5]).is_err());
    }
}
