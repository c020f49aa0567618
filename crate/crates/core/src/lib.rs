//! LiDAR-to-camera projection with timestamped extrinsic chains, a
//! deterministic sensor time-synchronization misalignment simulator, and a
//! deformable feature-fusion pipeline with analytic gradients.

pub mod analysis;
pub mod calib_io;
pub mod cli;
pub mod deform_fusion;
pub mod geometry;
pub mod pnm;
pub mod rng;
pub mod timing_sim;

pub use calib_io::{CalibrationRecord, EgoPoseRecord, Point, PointCloud};
pub use geometry::{
    CameraIntrinsics, DepthImage, ProjectedPoint, ProjectionStatus, Quaternion, RigidTransform,
    Vec3,
};
