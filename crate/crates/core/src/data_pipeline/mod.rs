//! Phantom generation and volume preprocessing.

mod histogram;
mod phantom;
mod resample;
mod slices;

pub use histogram::*;
pub use phantom::*;
pub use resample::*;
pub use slices::*;
