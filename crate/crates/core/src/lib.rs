#![cfg_attr(not(feature = "std"), no_std)]
//! Regression Monte Carlo solvers for regime-randomized HJB equations:
//! penalized and projected backward sweeps, a dual importance-sampling
//! estimator and an explicit finite-difference reference solver.

extern crate alloc;

pub mod bsde;
pub mod catalog;
pub mod dual;
pub mod error;
pub mod forward;
pub mod model;
mod par;
pub mod pde;
pub mod regression;
pub mod stats;

pub use error::{Error, Result};
