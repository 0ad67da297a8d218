//! Point-cloud preprocessing and depth-image rendering.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use thiserror::Error;

use crate::geometry::{CalibrationBundle, LidarPoint};

/// Defaults used by the pipeline config.
pub const DEFAULT_K_NEIGHBORS: usize = 16;
pub const DEFAULT_STD_RATIO: f64 = 2.0;
pub const DEFAULT_VOXEL_SIZE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointCloudError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("timestamp must be finite and >= 0, got {0}")]
    InvalidTimestamp(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Raw LiDAR samples stamped with the stream clock (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<LidarPoint>,
    timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>, timestamp: f64) -> Result<Self, PointCloudError> {
        if !(timestamp.is_finite() && timestamp >= 0.0) {
            return Err(PointCloudError::InvalidTimestamp(timestamp));
        }
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(PointCloudError::NonFinite { index });
        }
        Ok(Self { points, timestamp })
    }

    pub fn points(&self) -> &[LidarPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<LidarPoint> {
        self.points
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn with_points(&self, points: Vec<LidarPoint>) -> Self {
        Self {
            points,
            timestamp: self.timestamp,
        }
    }

    /// Mean distance of every point to its `k` nearest neighbours (itself excluded).
    ///
    /// Clouds with fewer than `k + 1` points use all remaining points.
    pub fn mean_neighbor_distances(&self, k: usize) -> Vec<f64> {
        let n = self.points.len();
        if n < 2 || k == 0 {
            return vec![0.0; n];
        }
        let coords: Vec<[f64; 3]> = self.points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree: ImmutableKdTree<f64, 3> =
            ImmutableKdTree::new_from_slice(&coords).expect("finite coordinates");
        let query_n = NonZeroUsize::new((k + 1).min(n)).expect("n >= 2");
        coords
            .iter()
            .map(|q| {
                let found = tree
                    .query(q)
                    .nearest_n::<SquaredEuclidean<f64>>(query_n)
                    .execute();
                // the query point itself is one of the zero-distance hits
                let sum: f64 = found.iter().skip(1).map(|r| r.distance.sqrt()).sum();
                sum / (found.len() - 1) as f64
            })
            .collect()
    }

    /// Statistical outlier removal.
    ///
    /// A point is dropped iff its mean distance to its `k_neighbors` nearest
    /// neighbours exceeds `mean + std_ratio · std` of that statistic over the cloud.
    /// Order of the surviving points is preserved. A single-point cloud is
    /// returned unchanged.
    pub fn denoise(&self, k_neighbors: usize, std_ratio: f64) -> Result<Self, PointCloudError> {
        if k_neighbors == 0 {
            return Err(PointCloudError::InvalidParameter(
                "k_neighbors must be >= 1".into(),
            ));
        }
        if !(std_ratio > 0.0) {
            return Err(PointCloudError::InvalidParameter(format!(
                "std_ratio must be > 0, got {std_ratio}"
            )));
        }
        if self.points.is_empty() {
            return Err(PointCloudError::EmptyCloud);
        }
        if self.points.len() == 1 {
            return Ok(self.clone());
        }
        let stats = self.mean_neighbor_distances(k_neighbors);
        let n = stats.len() as f64;
        let mean = stats.iter().sum::<f64>() / n;
        let var = stats.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        let fence = mean + std_ratio * var.sqrt();
        let kept = self
            .points
            .iter()
            .zip(&stats)
            .filter(|(_, &d)| d <= fence)
            .map(|(p, _)| *p)
            .collect();
        Ok(self.with_points(kept))
    }

    /// Voxel-grid downsampling: one centroid per occupied voxel, emitted in
    /// ascending voxel-index order.
    pub fn voxel_downsample(&self, voxel: f64) -> Result<Self, PointCloudError> {
        if !(voxel > 0.0 && voxel.is_finite()) {
            return Err(PointCloudError::InvalidParameter(format!(
                "voxel size must be > 0, got {voxel}"
            )));
        }
        if self.points.is_empty() {
            return Err(PointCloudError::EmptyCloud);
        }
        let mut cells: BTreeMap<[i64; 3], ([f64; 3], usize)> = BTreeMap::new();
        for p in &self.points {
            let entry = cells.entry(voxel_key(p, voxel)).or_insert(([0.0; 3], 0));
            entry.0[0] += p.x;
            entry.0[1] += p.y;
            entry.0[2] += p.z;
            entry.1 += 1;
        }
        let points = cells
            .into_values()
            .map(|(sum, count)| {
                let c = count as f64;
                LidarPoint::new(sum[0] / c, sum[1] / c, sum[2] / c)
            })
            .collect();
        Ok(self.with_points(points))
    }
}

pub(crate) fn voxel_key(p: &LidarPoint, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// Sparse per-pixel nearest camera-frame depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    timestamp: f64,
    // 0.0 marks an empty pixel; populated pixels are strictly positive
    depth: Vec<f64>,
}

impl DepthImage {
    pub fn empty(width: u32, height: u32, timestamp: f64) -> Self {
        Self {
            width,
            height,
            timestamp,
            depth: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    fn index(&self, col: u32, row: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    pub fn get(&self, col: u32, row: u32) -> Option<f64> {
        if col >= self.width || row >= self.height {
            return None;
        }
        let d = self.depth[self.index(col, row)];
        (d > 0.0).then_some(d)
    }

    /// Keeps the nearer of the stored and offered depth.
    pub fn splat_min(&mut self, col: u32, row: u32, depth: f64) {
        debug_assert!(depth > 0.0);
        let i = self.index(col, row);
        let cell = &mut self.depth[i];
        if *cell == 0.0 || depth < *cell {
            *cell = depth;
        }
    }

    pub fn populated_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Populated pixels as `(col, row, depth)` in row-major order.
    pub fn populated(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        let w = self.width as usize;
        self.depth
            .iter()
            .enumerate()
            .filter(|(_, d)| **d > 0.0)
            .map(move |(i, d)| ((i % w) as u32, (i / w) as u32, *d))
    }
}

/// Z-buffered projection of a LiDAR cloud into the calibrated camera.
///
/// Points with camera-frame `z <= 0` or projecting outside the image are skipped.
/// Sub-pixel coordinates are truncated to integer pixel indices and each pixel
/// keeps the smallest `Z_c` that lands on it.
pub fn render_depth_image(cloud: &PointCloud, calib: &CalibrationBundle) -> DepthImage {
    let mut img = DepthImage::empty(calib.image_width(), calib.image_height(), cloud.timestamp());
    let k = calib.intrinsics();
    for p in cloud.points() {
        let c = calib.lidar_to_camera_point(p);
        if !(c.z > 0.0) {
            continue;
        }
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        if !calib.contains_pixel(u, v) {
            continue;
        }
        img.splat_min(u as u32, v as u32, c.z);
    }
    img
}
