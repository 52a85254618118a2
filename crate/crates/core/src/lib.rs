//! Layer-wise learning-rate finetuning: network kernels with exact
//! gradients, staged models, step-decay SGD with per-stage multipliers,
//! the domain partitioning protocol, and sweep metrics.
//!
//! The crate is `no_std` and only needs an allocator.

#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
