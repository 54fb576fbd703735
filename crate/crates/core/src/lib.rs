//! Practical test-time adaptation on a synthetic corruption benchmark.
//!
//! The crate simulates continually changing, label-correlated test streams
//! and adapts a small pretrained BN-MLP online with RoTTA or one of the
//! Source / BN / PL / TENT baselines.

// NaN must fail validation, so negated comparisons are deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod cstu;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod rbn;
pub mod seed;
pub mod stream;
pub mod synth_data;

pub use error::{Error, Result};
