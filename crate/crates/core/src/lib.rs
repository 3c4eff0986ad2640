//! Four-level knowledge distillation for center-based 3D detectors.
//!
//! A LiDAR+semantics teacher and a LiDAR-only student share one toy
//! voxel/BEV architecture. The student learns from crucial heatmap responses,
//! crucial voxel features and relations, interpolated point features, and
//! RoI-grid pooled BEV features of its own NMS-filtered boxes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod optim;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
