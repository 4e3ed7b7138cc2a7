//! Exact sampling, spatial discretization and convergence verification for
//! linear SPDE bridges with observation noise.
//!
//! The SPDE is the stochastic heat equation `dX = -A X dt + dW` on `(0, 1)`
//! with Dirichlet conditions, observed at time `T` through `X(T) + Z`. All
//! numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which the verification suite uses.

// Negated comparisons are how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod error;
pub mod fem;
pub mod forward;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type SpectralModel = model::SpectralModel<f64>;
pub type TimeGrid = forward::TimeGrid<f64>;
pub type PathEnsemble = forward::PathEnsemble<f64>;
pub type BridgeTarget = bridge::BridgeTarget<f64>;
pub type FemSystem = fem::FemSystem<f64>;

pub type SpectralModelF32 = model::SpectralModel<f32>;
pub type TimeGridF32 = forward::TimeGrid<f32>;
pub type PathEnsembleF32 = forward::PathEnsemble<f32>;
pub type BridgeTargetF32 = bridge::BridgeTarget<f32>;
pub type FemSystemF32 = fem::FemSystem<f32>;
