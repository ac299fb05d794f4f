//! Train small residual ReLU networks, prune their convolutions by global
//! magnitude, and verify L∞ local robustness with bound propagation and
//! branch-and-bound.

pub mod data;
pub mod error;
pub mod harness;
pub mod model_io;
pub mod net;
pub mod ops;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use net::{Conv2d, Gradients, Head, Layer, Linear, Mask, Network, ResNet4Config, Trace};
pub use tensor::{Scalar, Tensor};
