//! Toy-scale lab for contrastive sentence encoders: a small transformer,
//! in-batch InfoNCE with intermediate-layer negatives, and over-smoothing
//! diagnostics.

pub mod cli;
pub mod contrastive;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
