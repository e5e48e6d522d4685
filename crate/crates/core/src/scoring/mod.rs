//! Pixel-wise abnormality scores and their rectified ROC evaluation.

mod mask;
mod map;
mod roc;

pub use mask::*;
pub use map::*;
pub use roc::*;
