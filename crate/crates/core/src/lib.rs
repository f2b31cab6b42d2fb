//! Camera-to-LiDAR-map registration toolkit.
//!
//! A point cloud map is rendered into the camera frame at an initial pose
//! guess, occluded points are filtered, and a regressor iteratively predicts
//! corrections that move the guess towards the true camera pose.

pub mod augment;
pub mod bench;
pub mod camera;
pub mod eval;
pub mod kitti;
pub mod losses;
pub mod map;
pub mod occlusion;
pub mod pipeline;
pub mod projection;
pub mod refine;
pub mod scene;
pub mod se3;

pub use camera::CameraModel;
pub use map::{CropSpec, PointCloudMap};
pub use occlusion::OcclusionParams;
pub use pipeline::RenderPipeline;
pub use projection::DepthImage;
pub use se3::{PoseSE3, Quat};
