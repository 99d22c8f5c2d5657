//! Simulation and estimation toolkit for time-modulated (time-Floquet)
//! reconfigurable intelligent surfaces.
//!
//! * [`floquet`]: harmonic grid, load Floquet matrices and multi-harmonic channels.
//! * [`gauge`]: ambiguity transformations of per-harmonic proxy parameters.
//! * [`scenario`]: synthetic ground truth, JSON and Touchstone I/O.
//! * [`measurement`]: measurement modes, noise and simulated campaigns.
//! * [`estimation`]: per-harmonic proxy fits and cross-harmonic gauge alignment.
//! * [`eval`]: accuracy metric, harmonic-gain optimization and experiment drivers.

// negated comparisons deliberately treat NaN as invalid
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod eval;
pub mod floquet;
pub mod gauge;
pub mod grid;
pub mod json;
pub mod linalg;
pub mod measurement;
pub mod rng;
pub mod scenario;
pub mod touchstone;

pub use error::{Error, Result};
pub use linalg::{CMatrix, CVector, C64};
