//! Point-based radar odometry, metric localisation and pose-graph SLAM at
//! desk scale.
//!
//! The crate is organised around a differentiable front end (keypoint
//! extraction, dense soft matching, weighted-SVD pose estimation) that can
//! be trained end to end from relative pose supervision alone, plus the
//! surrounding toolkit: a synthetic radar simulator, place recognition,
//! an SE(2) pose-graph optimiser and odometry drift metrics.

pub mod geometry;
pub mod grid;
pub mod keypoints;
pub mod learner;
pub mod matcher;
pub mod pose_solver;
pub mod simulator;
pub mod sample;

pub use geometry::Se2;
pub use grid::{pix2world, world2pix, Grid2, PixelCoord, WorldCoord};
