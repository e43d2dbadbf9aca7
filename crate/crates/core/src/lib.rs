//! Joint keypoint detection, description and rigid registration for large
//! LiDAR point clouds.
//!
//! The pipeline samples candidate points uniformly at random, groups each
//! candidate's neighborhood with a random dilation cluster, aggregates
//! positions and features with a small attention network to produce
//! keypoints with saliency uncertainties, and fuses cluster features into
//! per-keypoint descriptors. Training is weakly supervised: only the
//! ground-truth relative transform of a scan pair is needed. Registration
//! runs descriptor matching plus RANSAC with an adaptive iteration count.
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`) through
//! the [`Real`] trait; concrete aliases for both precisions are exported at
//! the crate root.

pub mod cloud;
pub mod config;
pub mod dataset;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod register;
pub mod scalar;
pub mod spatial;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{derive_seed, Real};

/// Production precision (fast path).
pub type PointCloud32 = cloud::PointCloud<f32>;
/// Reference precision (gradient checks, determinism tests).
pub type PointCloud64 = cloud::PointCloud<f64>;
pub type RigidTransform32 = cloud::RigidTransform<f32>;
pub type RigidTransform64 = cloud::RigidTransform<f64>;
pub type NetParams32 = nn::NetParams<f32>;
pub type NetParams64 = nn::NetParams<f64>;
pub type KeypointSet32 = detector::KeypointSet<f32>;
pub type KeypointSet64 = detector::KeypointSet<f64>;
pub type DescriptorSet32 = descriptor::DescriptorSet<f32>;
pub type DescriptorSet64 = descriptor::DescriptorSet<f64>;
