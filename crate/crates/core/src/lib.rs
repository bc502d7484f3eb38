//! LiDAR odometry and mapping built on geometric-consistency correspondence
//! voting.
//!
//! The pipeline reads rotating-LiDAR scans, extracts edge and planar features
//! just below the extremes of the smoothness ordering, matches them against
//! the previous scan through a k-d tree, filters the matches with a pairwise
//! distance-consistency vote, and estimates motion with vote-weighted
//! point-to-line / point-to-plane residuals. A lightweight scan-to-map stage
//! refines the global pose against a voxelized feature map.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod ingest;
pub mod mapping;
pub mod matching;
pub mod odometry;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::PoseSE3;
