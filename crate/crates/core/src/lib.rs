// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dba;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod panoptic;
pub mod pipeline;
pub mod simworld;
pub mod vps;

pub use error::{Error, Result};
pub use grid::Grid;
