//! Ramified (branched) transport: mollified irrigation costs, exact Gilbert
//! energies on explicit trees, and projected gradient descent for irrigation
//! patterns and tree shapes.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod geometry;
pub mod kernels;
pub mod mollified;
pub mod objective;
pub mod optimizer;
pub mod plan;
pub mod svg;

pub use error::{RamifyError, Result};
pub use geometry::Point;
