//! Stimuli-sensitive Hawkes processes for student activity sequences.
//!
//! Each student-assignment pair is a point process whose intensity mixes
//! three external stimuli (a daily habit sinusoid, a decaying assignment
//! opening effect and a reversed log-normal deadline effect) with
//! exponential self-excitation. Parameters are shared across pairs through
//! per-student vectors and low-rank student x assignment matrices, which lets
//! the model predict activity for pairs that were never observed.
//!
//! Modules follow the workflow:
//! - [`model`]: domain types, CSV ingestion, splitting and initialization
//! - [`intensity`]: rates, compensators, log-likelihood and gradients
//! - [`inference`]: accelerated proximal gradient fitting
//! - [`simulation`]: thinning sampler and synthetic course generation
//! - [`prediction`]: Monte Carlo next-arrival prediction and scoring
//! - [`analysis`]: clustering of fitted parameters and grade tests

pub mod analysis;
pub mod error;
pub mod inference;
pub mod intensity;
pub mod model;
pub mod prediction;
pub mod simulation;

pub use error::{Error, Result};
