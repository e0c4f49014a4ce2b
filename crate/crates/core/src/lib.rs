//! Core library for the multi-touch attribution pipeline: synthetic journey
//! generation, journey reweighting, debiased conversion prediction, Shapley
//! credit assignment, and evaluation utilities.

pub mod attribution;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod predictor;
pub mod reweighting;
pub mod rng;
pub mod synthgen;

pub use error::{CoreError, Result};
