use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{param::check_finite, Parameter};
use crate::error::{Error, Result};
use crate::solvers::prox;

/// Decomposable norm penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// Sum of absolute entries; dual is the max-abs norm.
    L1,
    /// Sum of singular values; dual is the operator norm.
    Nuclear,
}

impl Regularizer {
    pub fn norm(self, theta: &Parameter) -> Result<f64> {
        check_finite(theta.as_slice())?;
        Ok(match self {
            Regularizer::L1 => theta.l1_norm(),
            Regularizer::Nuclear => singular_values(theta.as_matrix())?.iter().sum(),
        })
    }

    pub fn dual_norm(self, v: &Parameter) -> Result<f64> {
        check_finite(v.as_slice())?;
        Ok(match self {
            Regularizer::L1 => v.max_abs(),
            Regularizer::Nuclear => singular_values(v.as_matrix())?.iter().fold(0.0f64, |m, s| m.max(*s)),
        })
    }

    /// Proximal map `argmin_z 0.5 ||z - theta||^2 + t * R(z)`.
    pub fn prox(self, theta: &Parameter, t: f64) -> Result<Parameter> {
        match self {
            Regularizer::L1 => {
                let out = prox::prox_l1(theta.as_slice(), t)?;
                Ok(Parameter::from_raw(
                    theta.shape(),
                    DMatrix::from_vec(theta.as_matrix().nrows(), theta.as_matrix().ncols(), out),
                ))
            }
            Regularizer::Nuclear => {
                let out = prox::svd_shrink(theta.as_matrix(), t)?;
                Ok(Parameter::from_raw(theta.shape(), out))
            }
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regularizer::L1 => f.write_str("l1"),
            Regularizer::Nuclear => f.write_str("nuclear"),
        }
    }
}

pub(crate) fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let svd = m
        .clone()
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    Ok(svd.singular_values.iter().copied().collect())
}
