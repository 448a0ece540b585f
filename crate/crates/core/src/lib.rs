//! Fluid limits, diffusion approximations and LQR rate control for large
//! weakly interacting finite-state jump-Markov systems.
//!
//! The pipeline runs: a [`model::ModelSpec`] defines the controlled jump
//! system; [`fluid`] solves its law-of-large-numbers ODE; [`coeffs`] builds
//! the coefficients of the limit diffusion; [`lqr`] synthesizes the
//! box-truncated linear feedback; [`ctmc`] and [`sde`] estimate costs of the
//! `N`-particle system and of the diffusion under any feedback law.

pub mod coeffs;
pub mod conditions;
pub mod control;
pub mod ctmc;
pub mod error;
pub mod experiment;
pub mod fluid;
pub mod interp;
pub mod lossnet;
pub mod lqr;
pub mod model;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod two_state;

pub use error::{Error, Result};

/// Crate version embedded in every report.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
