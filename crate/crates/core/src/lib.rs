//! Tri-planar vessel-wall segmentation.
//!
//! A volume is cut into axial, lateral and frontal slices, each view is
//! segmented by its own U-Net, the lateral and frontal results are turned
//! back into axial orientation, and a small inception-block network fuses
//! the three axial maps into the final probability map.
//!
//! - [`volume`]: volumes, reslicing, resizing, intensity rescaling, file format.
//! - [`phantom`]: synthetic vessel volumes with exact wall masks.
//! - [`nn`]: the CPU network engine.
//! - [`models`]: U-Net and fusion-network graphs and their weights.
//! - [`training`]: loss, Adam and the training loops.
//! - [`fusion`]: the inference graph.
//! - [`metrics`]: DSC, sensitivity, IoU, ROC and AUC.

pub mod error;
pub mod fusion;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
