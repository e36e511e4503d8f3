//! Simulation and parameter reconstruction for Gaussian probes evolving under
//! time-local (convolutionless) non-Markovian master equations that preserve
//! Gaussian shape.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: Hamiltonian parameters, cumulant states, coefficient models.
//! - [`dynamics`]: propagators, cumulant evolution and rotating-frame relations.
//! - [`tomography`]: Gaussian tomograms and the finite-point inversion to cumulants.
//! - [`benchmark`]: the Ohmic quantum Brownian motion coefficients.
//! - [`reconstruct`]: integral and differential parameter reconstruction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod numerics;
pub mod reconstruct;
pub mod tomography;

pub use error::{Error, Result};
