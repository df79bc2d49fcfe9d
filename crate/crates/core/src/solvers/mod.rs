//! Optimization kernels shared by the transfer and selection estimators.

mod fit;
mod lasso;
mod linalg;
mod nuclear;
pub mod prox;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fit::{fit_dataset, fit_single, lambda_max, FitOutcome};
pub(crate) use fit::{fit_glm, lambda_max_glm};
pub use lasso::{lasso_cd, lasso_kkt_residual, lasso_objective, GramLasso, LassoFit};
pub use linalg::{solve_pd, PdFactor};
pub use nuclear::{quad_admm_nuclear, quad_admm_nuclear_objective, NuclearFit};
pub use prox::{prox_l1, svd_shrink};

/// Iteration limits, tolerances and ADMM penalties.
///
/// `tolerance` is the relative change used by coordinate descent and the
/// outer quadratic-approximation loop; `residual_abs`/`residual_rel` drive
/// the ADMM primal/dual residual stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Coordinate-descent sweep limit.
    pub max_iterations: usize,
    /// Outer (quadratic approximation / DC) iteration limit.
    pub max_outer_iterations: usize,
    /// ADMM sweep limit per outer iteration.
    pub max_admm_iterations: usize,
    pub tolerance: f64,
    pub admm_rho: f64,
    pub admm_rho1: f64,
    pub admm_rho2: f64,
    pub residual_abs: f64,
    pub residual_rel: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 1000,
            max_outer_iterations: 100,
            max_admm_iterations: 500,
            tolerance: 1e-6,
            admm_rho: 1.0,
            admm_rho1: 1.0,
            admm_rho2: 1.0,
            residual_abs: 1e-6,
            residual_rel: 1e-4,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.max_outer_iterations == 0 || self.max_admm_iterations == 0 {
            return Err(Error::invalid("iteration limits must be >= 1"));
        }
        let positives = [
            ("tolerance", self.tolerance),
            ("admm_rho", self.admm_rho),
            ("admm_rho1", self.admm_rho1),
            ("admm_rho2", self.admm_rho2),
            ("residual_abs", self.residual_abs),
            ("residual_rel", self.residual_rel),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Same options with every tolerance multiplied by `factor`.
    pub fn tightened(mut self, factor: f64) -> Self {
        self.tolerance *= factor;
        self.residual_abs *= factor;
        self.residual_rel *= factor;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SolverOptions::default().validate().unwrap();
    }

    #[test]
    fn rejects_nonpositive() {
        let o = SolverOptions {
            admm_rho2: 0.0,
            ..Default::default()
        };
        assert!(o.validate().is_err());
        let o = SolverOptions {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(o.validate().is_err());
    }
}
