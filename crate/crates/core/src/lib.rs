//! Monte Carlo simulation of stochastic acceleration of a particle moving
//! through a random array of time-dependent scatterers, together with the
//! reduced speed chain, its Bessel-process limit and auxiliary processes.

pub mod aux_process;
pub mod bessel;
pub mod ensemble;
pub mod harness;
pub mod estimators;
pub mod error;
pub mod ode;
pub mod particle_chain;
pub mod potential;
pub mod rng;
pub mod scattering;
pub mod stats;
pub mod verify;
pub mod xi_chain;

pub use error::{Error, Result};
