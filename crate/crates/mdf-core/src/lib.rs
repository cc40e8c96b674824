//! Core library for the multimodal diffusion forcing system.
//!
//! A diffusion model over multimodal trajectories trained with a 2D
//! time–modality noise level matrix, with conditional sampling modes
//! (policy / planner / inverse dynamics / state estimation) and per-entry
//! anomaly localization, exercised on a synthetic 2D peg-in-slot world.

pub mod anomaly;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod world;
pub mod error;
pub mod infer;
pub mod model;
pub mod noise;
pub mod rng;
pub mod schedule;
pub mod schema;
#[cfg(test)]
pub(crate) mod test_util;
pub mod train;

pub use error::{MdfError, Result};
