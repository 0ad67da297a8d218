//! Detection data model, the pluggable detector interface and evaluation metrics.
//!
//! The detector itself is out of scope: [`RecordedDetector`] replays detections that
//! were produced offline and stored one file per image frame.

pub mod metrics;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    average_precision, iou, map50_95, match_detections, mean_ap, precision_recall,
    ClassEvaluation, ClassMatches, DetectionEvaluator, EvaluationReport, MatchResult,
    MetricsError, PrecisionRecall, IOU_SWEEP,
};

/// The four object classes tracked on site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Hook,
    Mic,
    MicFrame,
    Human,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [Self::Hook, Self::Mic, Self::MicFrame, Self::Human];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Hook => "hook",
            Self::Mic => "mic",
            Self::MicFrame => "mic_frame",
            Self::Human => "human",
        }
    }

    /// Load-bearing classes that can anchor the danger zone.
    pub fn is_lift_target(&self) -> bool {
        !matches!(self, Self::Human)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = DetectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| DetectionError::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("invalid bounding box {0:?}: need u_min < u_max and v_min < v_max")]
    InvalidBox([f64; 4]),
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("unknown class label {0:?}")]
    UnknownClass(String),
}

/// Axis-aligned pixel box `(u_min, v_min, u_max, v_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BBox {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Result<Self, DetectionError> {
        let all_finite = [u_min, v_min, u_max, v_max].iter().all(|v| v.is_finite());
        if !all_finite || !(u_min < u_max) || !(v_min < v_max) {
            return Err(DetectionError::InvalidBox([u_min, v_min, u_max, v_max]));
        }
        Ok(Self {
            u_min,
            v_min,
            u_max,
            v_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.u_min + self.u_max),
            0.5 * (self.v_min + self.v_max),
        )
    }

    /// Overlap box, if the two boxes share positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.u_min.max(other.u_min),
            self.v_min.max(other.v_min),
            self.u_max.min(other.u_max),
            self.v_max.min(other.v_max),
        )
        .ok()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    /// Clamps to `[0, width] × [0, height]`; `None` if nothing is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        let (w, h) = (width as f64, height as f64);
        BBox::new(
            self.u_min.clamp(0.0, w),
            self.v_min.clamp(0.0, h),
            self.u_max.clamp(0.0, w),
            self.v_max.clamp(0.0, h),
        )
        .ok()
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u_min && u < self.u_max && v >= self.v_min && v < self.v_max
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = DetectionError;

    fn try_from(a: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.u_min, b.v_min, b.u_max, b.v_max]
    }
}

/// One 2D detection (or ground-truth box, with confidence 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection", into = "RawDetection")]
pub struct Detection {
    pub label: ClassLabel,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(label: ClassLabel, bbox: BBox, confidence: f64) -> Result<Self, DetectionError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DetectionError::InvalidConfidence(confidence));
        }
        Ok(Self {
            label,
            bbox,
            confidence,
        })
    }

    pub fn ground_truth(label: ClassLabel, bbox: BBox) -> Self {
        Self {
            label,
            bbox,
            confidence: 1.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawDetection {
    class: ClassLabel,
    bbox: BBox,
    confidence: f64,
}

impl TryFrom<RawDetection> for Detection {
    type Error = DetectionError;

    fn try_from(r: RawDetection) -> Result<Self, Self::Error> {
        Detection::new(r.class, r.bbox, r.confidence)
    }
}

impl From<Detection> for RawDetection {
    fn from(d: Detection) -> Self {
        RawDetection {
            class: d.label,
            bbox: d.bbox,
            confidence: d.confidence,
        }
    }
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no recorded detections for frame {image_ref:?} at t={timestamp}")]
    MissingFrame { image_ref: String, timestamp: f64 },
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

/// Source of per-frame 2D detections.
pub trait Detector {
    fn detect(&self, image_ref: &str, frame_ts: f64) -> Result<Vec<Detection>, DetectorError>;
}

/// Timestamps are matched to recorded frames within this many seconds.
const FRAME_TS_EPS: f64 = 1e-9;

/// File-backed detector stub: returns the detections recorded for a frame verbatim.
#[derive(Debug, Clone, Default)]
pub struct RecordedDetector {
    frames: Vec<(f64, PathBuf)>,
}

impl RecordedDetector {
    pub fn new(frames: Vec<(f64, PathBuf)>) -> Self {
        Self { frames }
    }

    /// Image entries (those carrying a detections file) of a replay manifest.
    pub fn from_manifest(manifest: &crate::io::Manifest) -> Self {
        let frames = manifest
            .frames
            .iter()
            .filter_map(|f| Some((f.timestamp, manifest.resolve(f.detections.as_ref()?))))
            .collect();
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl Detector for RecordedDetector {
    fn detect(&self, image_ref: &str, frame_ts: f64) -> Result<Vec<Detection>, DetectorError> {
        let (_, path) = self
            .frames
            .iter()
            .find(|(ts, _)| (ts - frame_ts).abs() <= FRAME_TS_EPS)
            .ok_or_else(|| DetectorError::MissingFrame {
                image_ref: image_ref.to_string(),
                timestamp: frame_ts,
            })?;
        Ok(crate::io::read_detections(path)?)
    }
}
