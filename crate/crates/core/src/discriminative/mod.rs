//! Patch embeddings trained with a triplet margin objective.

mod model;
mod sampling;

pub use model::*;
pub use sampling::*;
