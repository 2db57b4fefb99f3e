//! Differentiable staggered-grid incompressible Navier-Stokes with
//! divergence-consistent discrete filtering and trainable LES closures.

pub mod analysis;
pub mod autodiff;
pub mod closure;
pub mod error;
pub mod filters;
pub mod grid;
pub mod initial_conditions;
pub mod les;
pub mod operators;
pub mod pipeline;
pub mod timestepping;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use grid::{Grid, Precision, ScalarField, VectorField, Weighting};
