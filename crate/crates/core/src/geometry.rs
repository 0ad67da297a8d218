//! Coordinate frames and the pixel / camera / LiDAR / world transform chain.
//!
//! Four frames are involved:
//!
//! - **pixel**: `(u, v)` image coordinates, optionally carrying the camera-frame depth `Z_c`
//! - **camera**: optical frame, `z` forward along the optical axis
//! - **LiDAR**: native sensor frame of the point cloud
//! - **world**: origin at the sensor tripod base, `z` up
//!
//! Each frame has its own point type so a LiDAR point cannot be passed where a
//! world point is expected. Homogeneous bookkeeping stays inside this module.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum per-entry deviation of `RᵀR` from the identity (and of `det R` from 1).
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-positive depth {0} (point behind or on the image plane)")]
    NonPositiveDepth(f64),
    #[error("rotation is not orthonormal: max |RᵀR - I| = {max_deviation:e}, det = {determinant}")]
    NonOrthonormalRotation { max_deviation: f64, determinant: f64 },
    #[error("homogeneous matrix bottom row must be [0, 0, 0, 1], got {0:?}")]
    NotRigid([f64; 4]),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("image size must be positive, got {width}x{height}")]
    InvalidImageSize { width: u32, height: u32 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

macro_rules! frame_point {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
        #[serde(from = "[f64; 3]", into = "[f64; 3]")]
        pub struct $name {
            pub x: f64,
            pub y: f64,
            pub z: f64,
        }

        impl $name {
            pub const fn new(x: f64, y: f64, z: f64) -> Self {
                Self { x, y, z }
            }

            pub fn is_finite(&self) -> bool {
                self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
            }

            pub fn distance(&self, other: &Self) -> f64 {
                (self.vector() - other.vector()).norm()
            }

            pub(crate) fn vector(&self) -> Vector3<f64> {
                Vector3::new(self.x, self.y, self.z)
            }

            pub(crate) fn from_vector(v: Vector3<f64>) -> Self {
                Self::new(v.x, v.y, v.z)
            }
        }

        impl From<[f64; 3]> for $name {
            fn from(a: [f64; 3]) -> Self {
                Self::new(a[0], a[1], a[2])
            }
        }

        impl From<$name> for [f64; 3] {
            fn from(p: $name) -> Self {
                [p.x, p.y, p.z]
            }
        }
    };
}

frame_point!(
    /// A point in the camera (optical) frame, meters.
    CameraPoint
);
frame_point!(
    /// A point in the LiDAR frame, meters.
    LidarPoint
);
frame_point!(
    /// A point in the world frame (tripod base origin, z up), meters.
    WorldPoint
);

/// Image coordinates in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn with_depth(self, depth: f64) -> DepthPixel {
        DepthPixel { u: self.u, v: self.v, depth }
    }
}

/// Pixel coordinates together with the camera-frame depth `Z_c` of the imaged point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPixel {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl DepthPixel {
    pub const fn new(u: f64, v: f64, depth: f64) -> Self {
        Self { u, v, depth }
    }

    pub fn pixel(&self) -> PixelPoint {
        PixelPoint::new(self.u, self.v)
    }
}

/// Pinhole intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// The 3×3 matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Projects a camera-frame point to pixel coordinates, keeping its depth.
pub fn camera_to_pixel(p: &CameraPoint, k: &Intrinsics) -> Result<DepthPixel, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(DepthPixel {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
        depth: p.z,
    })
}

/// `Z_c · K⁻¹ · [u, v, 1]ᵀ`.
pub fn pixel_to_camera(p: &DepthPixel, k: &Intrinsics) -> Result<CameraPoint, GeometryError> {
    if !(p.depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.depth));
    }
    Ok(CameraPoint {
        x: (p.u - k.cx) * p.depth / k.fx,
        y: (p.v - k.cy) * p.depth / k.fy,
        z: p.depth,
    })
}

/// A validated rigid-body transform `p ↦ R·p + t`.
///
/// Construction rejects rotations whose orthonormality or determinant is off by
/// more than [`ROTATION_TOLERANCE`]; nothing is re-orthonormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        Self::from_parts(r, Vector3::from(translation))
    }

    pub(crate) fn from_parts(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("rigid transform"));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform from a row-major homogeneous 4×4 matrix.
    pub fn from_homogeneous(m: &[[f64; 4]; 4]) -> Result<Self, GeometryError> {
        let bottom = m[3];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::NotRigid(bottom));
        }
        let r = Matrix3::from_fn(|i, j| m[i][j]);
        let t = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Self::from_parts(r, t)
    }

    pub fn to_homogeneous(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().take(3).enumerate() {
            for (j, cell) in row.iter_mut().take(3).enumerate() {
                *cell = self.rotation[(i, j)];
            }
            row[3] = self.translation[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians, then translation `t`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 3]) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(axis));
        let rotation = nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner();
        Self {
            rotation,
            translation: Vector3::from(t),
        }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let r = &self.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation.into()
    }

    /// `R·p + t`.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        self.apply_vec(&Vector3::from(p)).into()
    }

    pub(crate) fn apply_vec(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `(R, t)⁻¹ = (Rᵀ, -Rᵀ·t)`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    let gram = r.transpose() * r;
    let max_deviation = (gram - Matrix3::identity())
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let determinant = r.determinant();
    if max_deviation > ROTATION_TOLERANCE || (determinant - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(GeometryError::NonOrthonormalRotation {
            max_deviation,
            determinant,
        });
    }
    Ok(())
}

/// Intrinsics plus the two calibrated extrinsics of a sensor unit.
///
/// `lidar_to_camera` is `T^c_l` (maps LiDAR-frame points into the camera frame) and
/// `world_to_lidar` is `T^l_w` (maps world points into the LiDAR frame). Their
/// inverses are cached at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBundle {
    intrinsics: Intrinsics,
    lidar_to_camera: RigidTransform,
    world_to_lidar: RigidTransform,
    camera_to_lidar: RigidTransform,
    lidar_to_world: RigidTransform,
    image_width: u32,
    image_height: u32,
}

impl CalibrationBundle {
    pub fn new(
        intrinsics: Intrinsics,
        lidar_to_camera: RigidTransform,
        world_to_lidar: RigidTransform,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self, GeometryError> {
        intrinsics.validate()?;
        if image_width == 0 || image_height == 0 {
            return Err(GeometryError::InvalidImageSize {
                width: image_width,
                height: image_height,
            });
        }
        Ok(Self {
            intrinsics,
            camera_to_lidar: lidar_to_camera.inverse(),
            lidar_to_world: world_to_lidar.inverse(),
            lidar_to_camera,
            world_to_lidar,
            image_width,
            image_height,
        })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn lidar_to_camera(&self) -> &RigidTransform {
        &self.lidar_to_camera
    }

    pub fn world_to_lidar(&self) -> &RigidTransform {
        &self.world_to_lidar
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn lidar_to_camera_point(&self, p: &LidarPoint) -> CameraPoint {
        CameraPoint::from_vector(self.lidar_to_camera.apply_vec(&p.vector()))
    }

    pub fn camera_to_lidar_point(&self, p: &CameraPoint) -> LidarPoint {
        LidarPoint::from_vector(self.camera_to_lidar.apply_vec(&p.vector()))
    }

    pub fn world_to_lidar_point(&self, p: &WorldPoint) -> LidarPoint {
        LidarPoint::from_vector(self.world_to_lidar.apply_vec(&p.vector()))
    }

    pub fn lidar_to_world_point(&self, p: &LidarPoint) -> WorldPoint {
        WorldPoint::from_vector(self.lidar_to_world.apply_vec(&p.vector()))
    }

    pub fn world_to_camera_point(&self, p: &WorldPoint) -> CameraPoint {
        self.lidar_to_camera_point(&self.world_to_lidar_point(p))
    }

    pub fn camera_to_world_point(&self, p: &CameraPoint) -> WorldPoint {
        self.lidar_to_world_point(&self.camera_to_lidar_point(p))
    }

    /// Forward chain world → LiDAR → camera → pixel.
    pub fn project_world(&self, p: &WorldPoint) -> Result<DepthPixel, GeometryError> {
        camera_to_pixel(&self.world_to_camera_point(p), &self.intrinsics)
    }

    /// Position of the LiDAR origin expressed in the world frame.
    pub fn lidar_origin_world(&self) -> WorldPoint {
        self.lidar_to_world_point(&LidarPoint::new(0.0, 0.0, 0.0))
    }

    /// Position of the camera center expressed in the world frame.
    pub fn camera_origin_world(&self) -> WorldPoint {
        self.camera_to_world_point(&CameraPoint::new(0.0, 0.0, 0.0))
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.image_width as f64 && v < self.image_height as f64
    }
}

/// `P_w = T^w_l · T^l_c · (Z_c · K⁻¹ · [u, v, 1]ᵀ)`.
pub fn pixel_depth_to_world(
    p: &DepthPixel,
    calib: &CalibrationBundle,
) -> Result<WorldPoint, GeometryError> {
    let camera = pixel_to_camera(p, &calib.intrinsics)?;
    Ok(calib.camera_to_world_point(&camera))
}
