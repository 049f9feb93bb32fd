//! Panoramic multi-fisheye visual-inertial odometry with LiDAR depth fusion.
//!
//! The library models a rig of fisheye cameras as a single panoramic sphere:
//! every per-camera bearing is lifted onto one normalized sphere, triangulation
//! on the sphere is corrected for the offset between each physical camera
//! center and the sphere center, LiDAR clouds are projected onto the sphere to
//! supply feature depths, and a sliding-window visual-inertial estimator plus a
//! global pose graph produce the trajectory. A deterministic sensor simulator
//! and an ATE evaluator close the loop so the whole pipeline is testable
//! against ground truth.

pub mod depth;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod lm;
pub mod pipeline;
pub mod pose_graph;
pub mod rig;
pub mod sim;
pub mod streams;
pub mod triangulation;

pub use error::Error;
pub use geometry::{Pose, Rotation, Vec3};

/// Convenience result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
