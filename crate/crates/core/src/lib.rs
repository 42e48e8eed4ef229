//! Saliency-guided learnable image mixing for classifier training.

// `!(x > 0.0)` style checks are there to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mixer;
pub mod models;
pub mod nn;
pub mod rng;
pub mod saliency;
pub mod stats;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use rng::{Rng, SeedStreams};
