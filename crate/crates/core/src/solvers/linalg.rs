use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite matrix, reusable for
/// many right-hand sides.
#[derive(Debug, Clone)]
pub struct PdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl PdFactor {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::invalid(format!("matrix is {}x{}, not square", a.nrows(), a.ncols())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite matrix entry".into()));
        }
        let scale = a.amax().max(f64::MIN_POSITIVE);
        if (a - a.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Numerical("matrix is not symmetric".into()));
        }
        let chol = Cholesky::new(a.clone()).ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
        if chol.l_dirty().diagonal().iter().any(|d| *d <= 0.0 || !d.is_finite()) {
            return Err(Error::Numerical("matrix is not positive definite".into()));
        }
        Ok(PdFactor { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(Error::invalid(format!("rhs length {} for a {}-dim system", b.len(), self.dim())));
        }
        Ok(self.chol.solve(b))
    }
}

/// Solve `A x = b` for symmetric positive-definite `A`.
pub fn solve_pd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    PdFactor::new(a)?.solve(b)
}
