#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod io;
pub mod metrics;
pub mod shape;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
