//! Transfer-learning M-estimation for sparse linear regression and
//! generalized low-rank trace regression.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the shared domain types: [`Parameter`], [`Dataset`],
//!   [`Regularizer`] and [`LossFamily`], plus GLM loss/gradient/Hessian
//!   evaluation.
//! * [`solvers`] contains the optimization kernels (soft thresholding,
//!   singular value shrinkage, coordinate-descent lasso, the quadratic
//!   approximation ADMM for nuclear-norm penalized GLMs, and a
//!   positive-definite linear solver).
//! * [`transfer`] implements two-step oracle transfer: weighted pooling
//!   followed by fine-tuning on the target.
//! * [`selection`] implements the truncated-penalty joint estimator that
//!   selects informative sources while estimating the target.
//! * [`datagen`], [`tuning`] and [`experiments`] provide the simulation
//!   designs, cross-validation / grid search, and the replication harness.
//! * [`io`] reads and writes the on-disk dataset, parameter and tensor
//!   formats used by the command-line driver.

pub mod datagen;
pub mod error;
pub mod experiments;
pub mod io;
pub mod model;
pub mod selection;
pub mod solvers;
pub mod transfer;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{Dataset, LossFamily, Parameter, Regularizer, Shape};
pub use solvers::SolverOptions;
