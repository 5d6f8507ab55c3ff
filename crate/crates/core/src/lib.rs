//! Reduced-search-space semi-global matching with per-pixel Kalman filtering
//! of disparity and dense moving-object detection.

pub mod dataset;
pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matching_cost;
pub mod noise_calib;
pub mod raster;
pub mod sgm;
pub mod temporal;

pub use error::{Error, Result};
