//! Long-tailed classification over real and synthetic samples.
//!
//! The training loop runs two branches on a shared encoder: a mixing-based
//! classification branch that treats synthetic samples like real ones, and a
//! contrastive branch that detects unreliable synthetic samples with a
//! nearest-neighbour vote and handles them with one of three loss variants.
//!
//! Everything runs on the CPU in 64-bit arithmetic and is deterministic given
//! a seed.

pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mixer;
pub mod model;
pub mod rng;
pub mod syngen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
