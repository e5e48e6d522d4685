//! Anatomical fidelity of reconstructions, measured through an anatomy segmentation network.

mod metrics;
mod seg;

pub use metrics::*;
pub use seg::*;
