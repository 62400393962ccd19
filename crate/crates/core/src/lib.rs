//! Consensus-adaptive RANSAC for two-view geometry.
//!
//! The crate is `no_std` and needs only `alloc`. Enabling the `std` feature
//! switches nalgebra to its optimized matrix-product backend.

#![no_std]
// `!(x > 0.0)` deliberately treats NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod engine;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod neural;
pub mod refinement;
pub mod sampling;
pub mod scoring;
pub mod training;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
