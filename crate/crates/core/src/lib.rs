//! Multi-task dynamical systems.
//!
//! A latent code `z ~ N(0, I_k)` indexes a family of dynamical systems
//! through the constrained affine generator `θ = f(W z + b)`. This crate
//! provides the base models, exact gradients, variational learning of the
//! family from a collection of sequences, sequential inference of `z` for
//! new sequences by iterated adaptive importance sampling, forecasting,
//! baselines and the evaluation protocol.

// `!(x > 0.0)` deliberately rejects NaN; indexed loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adais;
pub mod baselines;
pub mod error;
pub mod generator;
pub mod gradients;
pub mod io;
pub mod kalman;
pub mod learning;
pub mod models;
pub mod numeric;
pub mod types;
pub mod variational;

#[cfg(test)]
mod testutil;

pub use error::{MtdsError, Result};
pub use generator::{Constraint, ConstraintSpec, ParamGenerator};
pub use models::{gaussian_loglik, BaseModel, ModelKind, NoisePrecision};
pub use types::{LatentCode, SequenceDataset, SequenceRecord};
pub use variational::{kl_diag_gaussian_to_standard, VariationalPosterior};
