//! Pipeline configuration file (TOML). Every section and key is optional.
//!
//! ```toml
//! [clustering]
//! method = "kmeans"            # kmeans | averaging | mean_shift
//! mean_shift_bandwidth = 0.5
//! occlusion_overlap_ratio = 0.2
//! occlusion_depth_gap = 1.0
//! kmeans = { max_iter = 100, tol = 1e-4, init = "optimal" }
//!
//! [zone]
//! radius = 3.0
//!
//! [alarm]
//! n_on = 3
//! n_off = 10
//!
//! [preprocess]
//! denoise = true
//! k_neighbors = 16
//! std_ratio = 2.0
//! voxel_size = 0.05            # 0 disables downsampling
//!
//! [sync]
//! tolerance = 0.06
//!
//! [localization]
//! mic_frame_z_offset = -1.5
//! hook_z_offset = -3.0
//! center_offset = { mic = 0.0, human = 0.0 }
//!
//! [compliance]
//! clearance = 3.0
//! hold_height = 0.3
//! hold_tolerance = 0.05
//! hold_duration = 3.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_cluster::ClusterConfig;
use crate::frame_sync::DEFAULT_SYNC_TOLERANCE;
use crate::io::{read_toml, IoError};
use crate::pointcloud::{DEFAULT_K_NEIGHBORS, DEFAULT_STD_RATIO, DEFAULT_VOXEL_SIZE};
use crate::safety::{AlarmConfig, ComplianceConfig, LocalizationConfig, ZoneConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid config value {key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub denoise: bool,
    pub k_neighbors: usize,
    pub std_ratio: f64,
    pub voxel_size: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            denoise: true,
            k_neighbors: DEFAULT_K_NEIGHBORS,
            std_ratio: DEFAULT_STD_RATIO,
            voxel_size: DEFAULT_VOXEL_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub tolerance: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_SYNC_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub clustering: ClusterConfig,
    pub zone: ZoneConfig,
    pub alarm: AlarmConfig,
    pub preprocess: PreprocessConfig,
    pub sync: SyncConfig,
    pub localization: LocalizationConfig,
    pub compliance: ComplianceConfig,
}

fn check(ok: bool, key: &'static str, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid { key, message: message() })
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = read_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            ConfigError::Io(IoError::Parse {
                path: "<config>".into(),
                message: e.to_string(),
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.clustering;
        check(c.kmeans.max_iter > 0, "clustering.kmeans.max_iter", || "must be >= 1".into())?;
        check(c.kmeans.tol >= 0.0, "clustering.kmeans.tol", || format!("{} < 0", c.kmeans.tol))?;
        check(positive(c.mean_shift_bandwidth), "clustering.mean_shift_bandwidth", || {
            format!("{} is not > 0", c.mean_shift_bandwidth)
        })?;
        check(
            (0.0..=1.0).contains(&c.occlusion_overlap_ratio),
            "clustering.occlusion_overlap_ratio",
            || format!("{} outside [0, 1]", c.occlusion_overlap_ratio),
        )?;
        check(c.occlusion_depth_gap >= 0.0, "clustering.occlusion_depth_gap", || {
            format!("{} < 0", c.occlusion_depth_gap)
        })?;
        check(positive(self.zone.radius), "zone.radius", || format!("{} is not > 0", self.zone.radius))?;
        check(self.alarm.n_on > 0, "alarm.n_on", || "must be >= 1".into())?;
        check(self.alarm.n_off > 0, "alarm.n_off", || "must be >= 1".into())?;
        let p = &self.preprocess;
        check(p.k_neighbors > 0, "preprocess.k_neighbors", || "must be >= 1".into())?;
        check(positive(p.std_ratio), "preprocess.std_ratio", || format!("{} is not > 0", p.std_ratio))?;
        check(p.voxel_size >= 0.0 && p.voxel_size.is_finite(), "preprocess.voxel_size", || {
            format!("{} < 0", p.voxel_size)
        })?;
        check(positive(self.sync.tolerance), "sync.tolerance", || {
            format!("{} is not > 0", self.sync.tolerance)
        })?;
        let k = &self.compliance;
        check(positive(k.clearance), "compliance.clearance", || format!("{} is not > 0", k.clearance))?;
        check(positive(k.hold_height), "compliance.hold_height", || format!("{} is not > 0", k.hold_height))?;
        check(k.hold_tolerance >= 0.0, "compliance.hold_tolerance", || format!("{} < 0", k.hold_tolerance))?;
        check(k.hold_duration >= 0.0, "compliance.hold_duration", || format!("{} < 0", k.hold_duration))?;
        Ok(())
    }
}
