//! Point-cloud classification and segmentation on a from-scratch
//! reverse-mode tensor core.
//!
//! The network couples a shared-MLP backbone with two operators: a graph
//! embedding stage that gathers each point's most covariance-correlated
//! peers, and a four-branch convolution pyramid over the point-feature grid.
//! Everything — tensors, autodiff, batch norm, Adam, data handling, training
//! — lives in this crate; the companion CLI crate wraps it in commands.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gem;
pub mod model;
pub mod nn;
pub mod pan;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{backward, ops, NoGradGuard, Rng64, Scalar, Tensor};
