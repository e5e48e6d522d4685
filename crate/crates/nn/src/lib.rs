//! Minimal CPU engine for small convolutional networks.
//!
//! Networks are trees of [`Module`]s whose tensors live in a [`ParamStore`]. A forward pass
//! returns the output together with a [`Cache`]; the backward pass consumes that cache, so one
//! network can be run several times (with different gradient routing) before an update.
//! Everything is generic over [`Scalar`] so gradients can be checked in `f64`.

pub mod conv;
mod float;
pub mod module;
mod network;
pub mod optim;
pub mod params;

pub use conv::Conv2d;
pub use float::Scalar;
pub use network::{Network, BN_MOMENTUM};
pub use module::{Activation, BatchNorm2d, Cache, Linear, Mode, Module, Residual};
pub use optim::{adam_update, Adam, AdamConfig};
pub use params::{Builder, Grads, Param, ParamId, ParamStore};
