//! Crane-lift safety monitoring from a calibrated camera and LiDAR pair.
//!
//! Frames flow `frame_sync -> safety::process_frame -> safety::AlarmMachine`:
//! 2D detections from the camera are paired with the nearest LiDAR sweep, the
//! sweep is rendered into a depth image, each box gets a depth from 1-D
//! clustering, and the box center is back-projected into world coordinates.
//! Humans within the cylindrical danger zone around the lifted module raise an
//! alarm; the module's height track is checked against the 3-3-3 procedure.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod depth_cluster;
pub mod detection;
pub mod frame_sync;
pub mod geometry;
pub mod io;
pub mod pointcloud;
pub mod replay;
pub mod safety;
pub mod synth;

pub use config::PipelineConfig;
pub use detection::{BBox, ClassLabel, Detection};
pub use geometry::{CalibrationBundle, CameraPoint, DepthPixel, Intrinsics, LidarPoint, RigidTransform, WorldPoint};
pub use pointcloud::{DepthImage, PointCloud};
