//! Heteroskedasticity-aware stratified (HS) sampling for randomized trials
//! with binary outcomes.
//!
//! The crate covers the whole pipeline without touching IO: fitting a
//! pre-experiment outcome model, searching the stratification threshold and
//! oversampling ratio, drawing the cohort and assigning treatment, estimating
//! average effects (difference in means, stratified, covariate-adjusted and
//! combined), fitting T/S/X meta-learners, and scoring them with Qini curves
//! that stay unbiased on oversampled cohorts. A scenario simulator with
//! analytic truth backs the tests and the experiment harness.
//!
//! It is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod design;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod frame;
pub mod learners;
pub mod math;
pub mod rng;
pub mod sampling;
pub mod simulation;
pub mod uplift;

pub use error::{Error, Result};
pub use frame::{FeatureMatrix, PopulationFrame, SimulatedTruth};
pub use rng::SeedSpec;
