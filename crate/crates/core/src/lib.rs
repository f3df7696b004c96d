//! Simulation, adjoint equations and second-order maximum principle checks for controlled
//! stochastic differential equations with distributed delay.

pub mod absde;
pub mod cli;
pub mod error;
pub mod hilbert;
pub mod measures;
pub mod model;
pub mod paths;
pub mod regression;
pub mod sdde;
pub mod smp;
pub mod stats;

pub use error::{Error, Result};
