//! Deterministic CPU tensor math: a small reverse-mode autodiff tape,
//! blocked matmul kernels, Adam, and finite-difference gradient checks.
//!
//! Generic over [`real::Real`] so the same graph code runs in f32 for
//! training and f64 for gradient verification.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod real;
pub mod tape;
pub mod tensor;

pub use adam::{AdamOutcome, AdamParams, AdamState};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
