//! Joint spatiotemporal calibration of a multi-sensor rig (cameras + LiDARs)
//! against a differentiable volumetric scene representation.
//!
//! The crate optimizes per-sensor extrinsics (6D rotation + translation) and
//! clock offsets jointly with a multi-resolution feature-grid scene field,
//! supervised by photometric, depth, structural-dissimilarity and
//! depth-smoothness losses. A built-in rig simulator produces synthetic
//! datasets with exact ground truth for end-to-end verification.

pub mod cli;
pub mod exec;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod optim;
pub mod render;
pub mod sim;
pub mod trajectory;
