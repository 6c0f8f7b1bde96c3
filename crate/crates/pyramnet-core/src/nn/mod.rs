//! Trainable layer state: batch normalization and the Adam optimizer, plus
//! finite-difference primitives for gradient verification.

pub mod adam;
pub mod batchnorm;
pub mod gradcheck;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use batchnorm::{bn_decay_at_epoch, BatchNorm, BnSchedule};
