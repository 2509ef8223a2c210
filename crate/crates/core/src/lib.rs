//! Magnitude-to-complex MRI data synthesis with a conditional score-based model,
//! plus the reconstruction, metrics and experiment pipeline built around it.

// `!(x > 0.0)` style checks are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fourier;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod recon;
pub mod rng;
pub mod score;
pub mod sde;
pub mod synthesis;

pub use error::{Error, Result};
