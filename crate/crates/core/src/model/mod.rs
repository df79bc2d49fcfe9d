//! Domain types shared by every estimator.

mod dataset;
mod family;
pub mod glm;
mod param;
mod regularizer;

pub use dataset::Dataset;
pub use family::LossFamily;
pub use glm::{glm_gradient, glm_hessian_vec, glm_hessian_vec_capped, glm_loss, GlmObjective, HESSIAN_COORD_CAP};
pub use param::{Parameter, Shape};
pub use regularizer::Regularizer;

pub(crate) use regularizer::singular_values;
