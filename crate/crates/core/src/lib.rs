//! Robust motion planning under stochastic dynamics through statistical
//! linearization.
//!
//! The crate propagates Gaussian beliefs along an Itô control system,
//! transcribes covariance-penalized optimal control problems into nonlinear
//! programs and solves them, checks the linearization error against Monte
//! Carlo ground truth, and runs Lie-bracket rank tests on the lifted
//! mean/covariance system. The 2-D powered-descent landing problem ships as
//! the reference scenario.

pub mod dynamics;
pub mod error;
pub mod propagate;
pub mod simulate;
pub mod bounds;
pub mod descent;
pub mod ocp;
pub mod accessibility;
pub mod cli;

pub use error::{Error, Result};
