//! Projector intrinsic calibration from pinhole-array masks.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod blobfield;
pub mod calibrate;
pub mod chief;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod graycode;
pub mod optics;
pub mod pipeline;
pub mod raster;

pub use error::{Error, Result};
