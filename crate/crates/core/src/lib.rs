//! Verification toolkit for closed-loop vision-based controllers.
//!
//! The crate is organised around the verification pipeline:
//!
//! - [`linprog`]: dense bounded-variable simplex used for every LP query.
//! - [`star`]: star / image-star sets with exact affine maps and LP bounds.
//! - [`nn`]: layer definitions, concrete evaluation, gradients and the
//!   abstract (star) transformers for every layer kind.
//! - [`env`]: CartPole, MountainCar and Pendulum dynamics, procedural
//!   cameras, analytic experts and concrete rollouts.
//! - [`training`]: paired dataset generation and the dual-objective
//!   decoder training loop (plus behavioral cloning of controllers).
//! - [`reach`]: interval dynamics, the closed-loop one-step operator,
//!   reach tubes and grid sweeps.
//! - [`conformal`]: trajectory scores, conformal quantiles and inflation.
//! - [`evaluation`]: ground-truth labeling and confusion metrics.
//! - [`formats`]: on-disk containers shared by training and verification.

pub mod conformal;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod interval;
pub mod linalg;
pub mod linprog;
pub mod nn;
pub mod reach;
pub mod star;
pub mod training;

pub use error::{Error, Result};

/// Default absolute tolerance for feasibility and containment checks.
pub const DEFAULT_TOL: f64 = 1e-8;
