//! Instruction-conditioned latent diffusion editing in a synthetic attribute world.
//!
//! The crate builds a frozen, seeded "toy world" (generator, inversion oracle,
//! identity extractor, orthonormal attribute directions) and trains a small
//! conditional diffusion transformer to perform instructed edits on latent
//! codes. Everything is deterministic given seeds, so training runs, datasets
//! and evaluation reports are reproducible bit-for-bit.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod model;
pub mod num;
pub mod parallel;
pub mod seed;
pub mod textcond;
pub mod trainer;
pub mod world;

pub use error::{EditError, Result};
pub use num::Real;
