//! Numerical core for multimodal task alignment between a BEV detection
//! branch and an object captioning branch.
//!
//! Everything here is `no_std` and needs only an allocator: the autograd
//! engine, the synthetic scene generator, both model branches, the two
//! alignment objectives, the evaluation metrics and a single optimizer step.
//! File formats, checkpoints and the experiment driver live in the `mta`
//! companion crate.

#![no_std]
#![deny(unused_must_use, rust_2018_idioms)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod alignment;
pub mod autograd;
pub mod captioning;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perception;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
