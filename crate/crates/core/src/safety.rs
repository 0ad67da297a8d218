//! Per-frame localization, the cylindrical danger zone, the alarm state machine
//! and the 3-3-3 lifting procedure checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::config::PipelineConfig;
use crate::depth_cluster::{
    estimate_target_depth, extract_bbox_depths, occlusion_check, remove_depth_outliers,
    ClusterError, ClusterMethod,
};
use crate::detection::{BBox, ClassLabel, Detection};
use crate::frame_sync::FramePair;
use crate::geometry::{pixel_depth_to_world, CalibrationBundle, DepthPixel, GeometryError, WorldPoint};
use crate::io::LocalizationPair;
use crate::pointcloud::{render_depth_image, PointCloudError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("frame at t={0} has an empty point cloud")]
    EmptyCloud(f64),
    #[error(transparent)]
    Cloud(#[from] PointCloudError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("lift track is empty")]
    EmptyTrack,
    #[error("lift track timestamps must increase strictly: {previous} then {current}")]
    NonMonotonicTrack { previous: f64, current: f64 },
    #[error("no localization pairs")]
    EmptyRun,
    #[error("danger-zone radius must be > 0, got {0}")]
    InvalidRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoneConfig {
    pub radius: f64,
}

impl Default for ZoneConfig {
    fn default() -> Self {
        Self { radius: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlarmConfig {
    /// Consecutive intruder frames before the alarm sounds.
    pub n_on: u32,
    /// Consecutive clear frames before it is silenced.
    pub n_off: u32,
}

impl Default for AlarmConfig {
    fn default() -> Self {
        Self { n_on: 3, n_off: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    /// Added to the world z of a MiC-frame detection to reach the module center.
    pub mic_frame_z_offset: f64,
    /// Added to the world z of a hook detection to reach the module center.
    pub hook_z_offset: f64,
    /// Per-class depth added along the viewing ray (surface to center).
    pub center_offset: BTreeMap<ClassLabel, f64>,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            mic_frame_z_offset: -1.5,
            hook_z_offset: -3.0,
            center_offset: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplianceConfig {
    /// Minimum horizontal human clearance from the lifted module (m).
    pub clearance: f64,
    /// Initial lift height (m).
    pub hold_height: f64,
    pub hold_tolerance: f64,
    /// Minimum hold at the initial lift height (s).
    pub hold_duration: f64,
}

impl Default for ComplianceConfig {
    fn default() -> Self {
        Self {
            clearance: 3.0,
            hold_height: 0.3,
            hold_tolerance: 0.05,
            hold_duration: 3.0,
        }
    }
}

/// A detection placed in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub label: ClassLabel,
    pub position: WorldPoint,
    pub depth_used: f64,
    pub source_bbox: BBox,
    pub method: ClusterMethod,
}

/// Ground-perpendicular cylinder of unbounded height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DangerZone {
    pub center_xy: [f64; 2],
    pub radius: f64,
}

impl DangerZone {
    pub fn new(center_xy: [f64; 2], radius: f64) -> Result<Self, SafetyError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(SafetyError::InvalidRadius(radius));
        }
        Ok(Self { center_xy, radius })
    }

    pub fn horizontal_distance(&self, p: &WorldPoint) -> f64 {
        (p.x - self.center_xy[0]).hypot(p.y - self.center_xy[1])
    }
}

/// Strictly inside the cylinder; z is ignored.
pub fn in_danger_zone(p: &WorldPoint, zone: &DangerZone) -> bool {
    zone.horizontal_distance(p) < zone.radius
}

pub fn horizontal_distance(a: &WorldPoint, b: &WorldPoint) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleStatus {
    Pass,
    Fail,
    Pending,
    NotApplicable,
}

/// Online 3-3-3 status of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCompliance {
    /// Human clearance around the module in this frame.
    pub clearance: RuleStatus,
    /// Initial lift and hold, as known so far. `Fail` while the module is up
    /// after skipping or cutting short the hold.
    pub lift: RuleStatus,
}

impl FrameCompliance {
    pub fn violated(&self) -> bool {
        self.clearance == RuleStatus::Fail || self.lift == RuleStatus::Fail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    /// No MiC, MiC frame or hook was localized; no zone this frame.
    NoTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub timestamp: f64,
    /// Module center estimate, from whichever target class was available.
    pub mic: Option<WorldObject>,
    pub humans: Vec<WorldObject>,
    /// Indices into `humans`.
    pub intruders: Vec<usize>,
    pub zone: Option<DangerZone>,
    pub compliance: FrameCompliance,
    pub status: FrameStatus,
}

impl SafetyVerdict {
    pub fn has_intruders(&self) -> bool {
        !self.intruders.is_empty()
    }
}

fn localize(
    det: &Detection,
    all: &[Detection],
    img: &crate::pointcloud::DepthImage,
    calib: &CalibrationBundle,
    config: &PipelineConfig,
) -> Result<Option<WorldObject>, SafetyError> {
    let samples = remove_depth_outliers(&extract_bbox_depths(img, &det.bbox));
    if samples.is_empty() {
        debug!(class = %det.label, "no depth samples in box");
        return Ok(None);
    }
    let occluded = config.clustering.method != ClusterMethod::Averaging
        && occlusion_check(det, all, img, &config.clustering);
    let offset = config.localization.center_offset.get(&det.label).copied().unwrap_or(0.0);
    let depth = estimate_target_depth(&samples, occluded, &config.clustering)? + offset;
    let (u, v) = det.bbox.center();
    let position = pixel_depth_to_world(&DepthPixel { u, v, depth }, calib)?;
    Ok(Some(WorldObject {
        label: det.label,
        position,
        depth_used: depth,
        source_bbox: det.bbox,
        method: config.clustering.method,
    }))
}

fn most_confident(objects: &[(f64, WorldObject)], label: ClassLabel) -> Option<WorldObject> {
    objects
        .iter()
        .filter(|(_, o)| o.label == label)
        .fold(None::<&(f64, WorldObject)>, |best, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, o)| *o)
}

/// Localizes every detection of a synchronized frame and evaluates the danger zone.
///
/// The module center comes from the most confident MiC box, else a MiC frame
/// box, else a hook box (the latter two shifted down by their configured z
/// offsets). The lift rule is left `Pending`; it depends on the track and is
/// filled in by [`LiftTrack::push`].
pub fn process_frame(
    pair: &FramePair,
    calib: &CalibrationBundle,
    config: &PipelineConfig,
) -> Result<SafetyVerdict, SafetyError> {
    if pair.cloud.is_empty() {
        return Err(SafetyError::EmptyCloud(pair.cloud_ts));
    }
    let pre = &config.preprocess;
    let mut cloud = pair.cloud.clone();
    if pre.denoise {
        cloud = cloud.denoise(pre.k_neighbors, pre.std_ratio)?;
    }
    if pre.voxel_size > 0.0 && !cloud.is_empty() {
        cloud = cloud.voxel_downsample(pre.voxel_size)?;
    }
    let img = render_depth_image(&cloud, calib);

    let in_view: Vec<Detection> = pair
        .detections
        .iter()
        .filter_map(|d| {
            let bbox = d.bbox.clamp_to(img.width(), img.height())?;
            Some(Detection { bbox, ..*d })
        })
        .collect();
    let mut objects = Vec::with_capacity(in_view.len());
    for det in &in_view {
        if let Some(obj) = localize(det, &in_view, &img, calib, config)? {
            objects.push((det.confidence, obj));
        }
    }

    let loc = &config.localization;
    let mic = most_confident(&objects, ClassLabel::Mic)
        .or_else(|| {
            most_confident(&objects, ClassLabel::MicFrame).map(|mut o| {
                o.position.z += loc.mic_frame_z_offset;
                o
            })
        })
        .or_else(|| {
            most_confident(&objects, ClassLabel::Hook).map(|mut o| {
                o.position.z += loc.hook_z_offset;
                o
            })
        });
    let humans: Vec<WorldObject> = objects
        .iter()
        .filter(|(_, o)| o.label == ClassLabel::Human)
        .map(|(_, o)| *o)
        .collect();

    let zone = match &mic {
        Some(m) => Some(DangerZone::new([m.position.x, m.position.y], config.zone.radius)?),
        None => None,
    };
    let intruders = match &zone {
        Some(z) => (0..humans.len()).filter(|i| in_danger_zone(&humans[*i].position, z)).collect(),
        None => Vec::new(),
    };
    let clearance = match &mic {
        Some(m) if humans
            .iter()
            .any(|h| horizontal_distance(&h.position, &m.position) < config.compliance.clearance) =>
        {
            RuleStatus::Fail
        }
        Some(_) => RuleStatus::Pass,
        None => RuleStatus::NotApplicable,
    };
    Ok(SafetyVerdict {
        timestamp: pair.image_ts,
        status: if mic.is_some() { FrameStatus::Ok } else { FrameStatus::NoTarget },
        mic,
        humans,
        intruders,
        zone,
        compliance: FrameCompliance {
            clearance,
            lift: if zone.is_some() { RuleStatus::Pending } else { RuleStatus::NotApplicable },
        },
    })
}

// ---- alarm state machine ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmMode {
    #[default]
    Idle,
    /// 3-3-3 violation without an intruder: visual warning only.
    Warning,
    Alarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmCommand {
    AudibleOn,
    AudibleOff,
    VisualOn,
    VisualOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlarmState {
    pub mode: AlarmMode,
    pub consecutive_danger_frames: u32,
    pub consecutive_clear_frames: u32,
    pub last_transition_ts: f64,
}

/// One debounced step of the alarm state machine.
///
/// A danger frame has at least one intruder. The alarm sounds after `n_on`
/// consecutive danger frames and is silenced after `n_off` consecutive frames
/// without one. Outside an alarm, a 3-3-3 violation raises the visual warning;
/// the warning is dropped after `n_off` consecutive frames with neither an
/// intruder nor a violation.
pub fn alarm_update(
    state: AlarmState,
    verdict: &SafetyVerdict,
    ts: f64,
    config: &AlarmConfig,
) -> (AlarmState, Vec<AlarmCommand>) {
    use AlarmCommand::*;

    let danger = verdict.has_intruders();
    let violation = verdict.compliance.violated();
    let clear = match state.mode {
        AlarmMode::Warning => !danger && !violation,
        _ => !danger,
    };
    let mut next = AlarmState {
        consecutive_danger_frames: if danger { state.consecutive_danger_frames + 1 } else { 0 },
        consecutive_clear_frames: if clear { state.consecutive_clear_frames + 1 } else { 0 },
        ..state
    };
    let mut commands = Vec::new();
    let target = match state.mode {
        AlarmMode::Idle | AlarmMode::Warning if next.consecutive_danger_frames >= config.n_on => {
            if state.mode == AlarmMode::Idle {
                commands.push(VisualOn);
            }
            commands.push(AudibleOn);
            AlarmMode::Alarm
        }
        AlarmMode::Idle if violation && !danger => {
            commands.push(VisualOn);
            AlarmMode::Warning
        }
        AlarmMode::Warning if next.consecutive_clear_frames >= config.n_off => {
            commands.push(VisualOff);
            AlarmMode::Idle
        }
        AlarmMode::Alarm if next.consecutive_clear_frames >= config.n_off => {
            commands.push(AudibleOff);
            if violation {
                AlarmMode::Warning
            } else {
                commands.push(VisualOff);
                AlarmMode::Idle
            }
        }
        mode => mode,
    };
    if target != state.mode {
        next.mode = target;
        next.last_transition_ts = ts;
        next.consecutive_clear_frames = 0;
    }
    (next, commands)
}

/// Serial owner of an [`AlarmState`].
#[derive(Debug, Clone, Default)]
pub struct AlarmMachine {
    state: AlarmState,
    config: AlarmConfig,
    alarms_raised: usize,
}

impl AlarmMachine {
    pub fn new(config: AlarmConfig) -> Self {
        Self {
            state: AlarmState::default(),
            config,
            alarms_raised: 0,
        }
    }

    pub fn state(&self) -> &AlarmState {
        &self.state
    }

    pub fn alarms_raised(&self) -> usize {
        self.alarms_raised
    }

    pub fn step(&mut self, verdict: &SafetyVerdict) -> Vec<AlarmCommand> {
        let (next, commands) = alarm_update(self.state, verdict, verdict.timestamp, &self.config);
        if next.mode == AlarmMode::Alarm && self.state.mode != AlarmMode::Alarm {
            self.alarms_raised += 1;
        }
        self.state = next;
        commands
    }
}

// ---- lift track and 3-3-3 ----

#[derive(Debug, Clone, Copy, PartialEq)]
enum HoldPhase {
    Grounded,
    Holding { start: f64, last: f64 },
    /// The first in-band run ended (or was skipped, with `start == None`).
    Done { start: Option<f64>, end: Option<f64>, passed: bool },
}

/// Incremental tracker of the first contiguous run of samples in the hold band.
#[derive(Debug, Clone, Copy, PartialEq)]
struct HoldTracker {
    phase: HoldPhase,
    config: ComplianceConfig,
}

impl HoldTracker {
    fn new(config: ComplianceConfig) -> Self {
        Self {
            phase: HoldPhase::Grounded,
            config,
        }
    }

    fn in_band(&self, h: f64) -> bool {
        (h - self.config.hold_height).abs() <= self.config.hold_tolerance
    }

    fn above_band(&self, h: f64) -> bool {
        h > self.config.hold_height + self.config.hold_tolerance
    }

    fn push(&mut self, ts: f64, height: f64) -> RuleStatus {
        let in_band = self.in_band(height);
        self.phase = match self.phase {
            HoldPhase::Grounded if in_band => HoldPhase::Holding { start: ts, last: ts },
            HoldPhase::Grounded if self.above_band(height) => HoldPhase::Done {
                start: None,
                end: None,
                passed: false,
            },
            HoldPhase::Holding { start, .. } if in_band => HoldPhase::Holding { start, last: ts },
            HoldPhase::Holding { start, last } => HoldPhase::Done {
                start: Some(start),
                end: Some(last),
                passed: last - start >= self.config.hold_duration,
            },
            phase => phase,
        };
        match self.phase {
            HoldPhase::Grounded | HoldPhase::Holding { .. } => RuleStatus::Pending,
            HoldPhase::Done { passed: true, .. } => RuleStatus::Pass,
            HoldPhase::Done { passed: false, .. } if self.above_band(height) => RuleStatus::Fail,
            HoldPhase::Done { passed: false, .. } => RuleStatus::Pending,
        }
    }

    /// `(hold interval, rule B passed, rule C passed)`.
    fn outcome(&self) -> (Option<(f64, f64)>, bool, bool) {
        match self.phase {
            HoldPhase::Grounded => (None, false, false),
            HoldPhase::Holding { start, last } => {
                (Some((start, last)), true, last - start >= self.config.hold_duration)
            }
            HoldPhase::Done { start: Some(s), end: Some(e), passed } => (Some((s, e)), true, passed),
            HoldPhase::Done { .. } => (None, false, false),
        }
    }
}

/// Time series of module center positions. Heights are relative to the first sample.
#[derive(Debug, Clone)]
pub struct LiftTrack {
    samples: Vec<(f64, WorldPoint)>,
    hold: HoldTracker,
}

impl LiftTrack {
    pub fn new(config: ComplianceConfig) -> Self {
        Self {
            samples: Vec::new(),
            hold: HoldTracker::new(config),
        }
    }

    pub fn from_samples(samples: &[(f64, WorldPoint)], config: ComplianceConfig) -> Result<Self, SafetyError> {
        let mut track = Self::new(config);
        for (ts, p) in samples {
            track.push(*ts, *p)?;
        }
        Ok(track)
    }

    /// Appends a sample and returns the online status of the lift rule.
    pub fn push(&mut self, ts: f64, position: WorldPoint) -> Result<RuleStatus, SafetyError> {
        if let Some((previous, _)) = self.samples.last() {
            if !(ts > *previous) {
                return Err(SafetyError::NonMonotonicTrack {
                    previous: *previous,
                    current: ts,
                });
            }
        }
        self.samples.push((ts, position));
        let height = position.z - self.samples[0].1.z;
        Ok(self.hold.push(ts, height))
    }

    pub fn samples(&self) -> &[(f64, WorldPoint)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn heights(&self) -> Vec<(f64, f64)> {
        let Some((_, origin)) = self.samples.first() else {
            return Vec::new();
        };
        self.samples.iter().map(|(t, p)| (*t, p.z - origin.z)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearanceViolation {
    pub timestamp: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    /// No human within the clearance of the module at any sample.
    pub clearance_ok: bool,
    pub clearance_violations: Vec<ClearanceViolation>,
    /// The load reached the hold band.
    pub lift_ok: bool,
    pub hold_interval: Option<(f64, f64)>,
    /// The hold lasted long enough before the load left the band.
    pub hold_ok: bool,
    pub measured_hold: f64,
}

impl ComplianceReport {
    pub fn passed(&self) -> bool {
        self.clearance_ok && self.lift_ok && self.hold_ok
    }
}

pub fn check_333(
    track: &LiftTrack,
    verdicts: &[SafetyVerdict],
    config: &ComplianceConfig,
) -> Result<ComplianceReport, SafetyError> {
    if track.is_empty() {
        return Err(SafetyError::EmptyTrack);
    }
    let mut clearance_violations = Vec::new();
    for v in verdicts {
        let Some(mic) = &v.mic else { continue };
        let closest = v
            .humans
            .iter()
            .map(|h| horizontal_distance(&h.position, &mic.position))
            .fold(f64::INFINITY, f64::min);
        if closest < config.clearance {
            clearance_violations.push(ClearanceViolation {
                timestamp: v.timestamp,
                distance: closest,
            });
        }
    }
    let mut hold = HoldTracker::new(*config);
    for (ts, h) in track.heights() {
        hold.push(ts, h);
    }
    let (hold_interval, lift_ok, hold_ok) = hold.outcome();
    Ok(ComplianceReport {
        clearance_ok: clearance_violations.is_empty(),
        clearance_violations,
        lift_ok,
        measured_hold: hold_interval.map_or(0.0, |(s, e)| e - s),
        hold_interval,
        hold_ok,
    })
}

// ---- localization error ----

pub fn distance_error(detected: &WorldPoint, truth: &WorldPoint) -> f64 {
    detected.distance(truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLocalization {
    pub label: ClassLabel,
    pub count: usize,
    pub mean_error: f64,
    pub max_error: f64,
    /// `(frame, error)` in input order.
    pub errors: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub classes: Vec<ClassLocalization>,
}

impl LocalizationReport {
    pub fn class(&self, label: ClassLabel) -> Option<&ClassLocalization> {
        self.classes.iter().find(|c| c.label == label)
    }
}

pub fn evaluate_localization(pairs: &[LocalizationPair]) -> Result<LocalizationReport, SafetyError> {
    if pairs.is_empty() {
        return Err(SafetyError::EmptyRun);
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<(String, f64)>> = BTreeMap::new();
    for p in pairs {
        by_class
            .entry(p.class)
            .or_default()
            .push((p.frame.clone(), distance_error(&p.detected, &p.truth)));
    }
    let classes = by_class
        .into_iter()
        .map(|(label, errors)| {
            let count = errors.len();
            ClassLocalization {
                label,
                count,
                mean_error: errors.iter().map(|(_, e)| e).sum::<f64>() / count as f64,
                max_error: errors.iter().map(|(_, e)| *e).fold(0.0, f64::max),
                errors,
            }
        })
        .collect();
    Ok(LocalizationReport { classes })
}
