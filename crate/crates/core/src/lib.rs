//! Sharp sensitivity bounds for the average potential outcome of a
//! continuous treatment under the continuous marginal sensitivity model.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod baseline;
pub mod bootstrap;
pub mod density;
pub mod error;
pub mod estimators;
pub mod model;
pub mod nuisance;
pub mod quantile;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
