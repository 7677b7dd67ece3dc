//! Semi-supervised binary patch classification with confidence-thresholded
//! pseudo-labels, built around a small densely connected network with
//! hand-derived gradients.

pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod infer;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod schedule;
pub mod ssl;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
