//! Gradient flows for optimization and sampling.
//!
//! * [`potentials`]: energies `V` with gradients and known constants.
//! * [`optimize`]: gradient descent and its implicit, preconditioned,
//!   mirror and quasi-Newton variants, with rate checks.
//! * [`sample`]: ULA, MALA, ensemble-preconditioned and birth-death
//!   Langevin samplers.
//! * [`density`]: grid densities, histograms, KDE and divergences.
//! * [`fpe`]: a finite-volume Fokker-Planck solver used as a density oracle.
//! * [`experiment`]: declarative experiment configs and their runner.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod density;
pub mod error;
pub mod experiment;
pub mod fpe;
pub mod optimize;
pub mod potentials;
pub mod rng;
pub mod sample;

pub use error::{Error, Result};
