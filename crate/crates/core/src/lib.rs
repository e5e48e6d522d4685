//! Reconstruction-based anomaly detection on brain-like volumes.

pub mod checkpoint;
pub mod data_pipeline;
pub mod discriminative;
pub mod fidelity;
pub mod reconstruction;
pub mod scoring;
mod error;
pub mod volume;

pub use error::{Error, Result};
