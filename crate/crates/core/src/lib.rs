//! User-level locally differentially private sparse linear regression.
//!
//! Users hold blocks of `m` samples. A first group of users each nominate one
//! variable from a local sparse fit; the curator aggregates the nominations
//! with a private prefix-tree heavy-hitter sweep. The remaining users fit
//! low-dimensional models on the chosen candidates and the curator averages
//! them either with a two-round range-then-mean mechanism or with private
//! accelerated gradient steps.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod data;
pub mod error;
pub mod harness;
pub mod heavy_hitter;
pub mod privacy;
pub mod private_mean;
pub mod protocols;
pub mod selectors;

mod clock;
mod linalg;

mod par;

pub use error::{Error, Result};
