//! Synthetic scenes with exact ground truth: axis-aligned boxes in the world,
//! sampled on the faces the LiDAR can see, plus projected 2D boxes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{BBox, ClassLabel, Detection};
use crate::geometry::{CalibrationBundle, WorldPoint};
use crate::io::{self, IoError, Manifest, ManifestFrame};
use crate::pointcloud::PointCloud;

pub const MIC_SIZE: [f64; 3] = [3.0, 6.0, 3.0];
pub const HUMAN_SIZE: [f64; 3] = [0.5, 0.4, 1.7];
pub const DEFAULT_DENSITY: f64 = 400.0;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

/// One box in the scene. Objects without a label are clutter: they return
/// points and occlude, but produce no detection or ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    #[serde(default)]
    pub label: Option<ClassLabel>,
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Overrides the scene density (points/m²).
    #[serde(default)]
    pub density: Option<f64>,
}

impl ObjectSpec {
    pub fn labeled(label: ClassLabel, center: [f64; 3], size: [f64; 3]) -> Self {
        Self {
            label: Some(label),
            center,
            size,
            density: None,
        }
    }

    pub fn clutter(center: [f64; 3], size: [f64; 3]) -> Self {
        Self {
            label: None,
            center,
            size,
            density: None,
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for i in 0..3 {
            lo[i] = self.center[i] - self.size[i] / 2.0;
            hi[i] = self.center[i] + self.size[i] / 2.0;
        }
        (lo, hi)
    }

    fn corners(&self) -> impl Iterator<Item = WorldPoint> {
        let (lo, hi) = self.bounds();
        (0..8).map(move |i| {
            WorldPoint::new(
                if i & 1 == 0 { lo[0] } else { hi[0] },
                if i & 2 == 0 { lo[1] } else { hi[1] },
                if i & 4 == 0 { lo[2] } else { hi[2] },
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub timestamp: f64,
    /// Std-dev (pixels) of Gaussian jitter added to each box coordinate.
    #[serde(default)]
    pub bbox_jitter: f64,
    /// Probability that a visible object's box is left out.
    #[serde(default)]
    pub dropout: f64,
}

fn default_density() -> f64 {
    DEFAULT_DENSITY
}

fn default_sigma() -> f64 {
    DEFAULT_NOISE_SIGMA
}

impl SceneSpec {
    pub fn new(objects: Vec<ObjectSpec>, seed: u64) -> Self {
        Self {
            objects,
            density: DEFAULT_DENSITY,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            seed,
            timestamp: 0.0,
            bbox_jitter: 0.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(invalid(format!("density must be > 0, got {}", self.density)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.bbox_jitter >= 0.0 && self.bbox_jitter.is_finite()) {
            return Err(invalid(format!("bbox_jitter must be >= 0, got {}", self.bbox_jitter)));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout must be in [0, 1], got {}", self.dropout)));
        }
        if !(self.timestamp >= 0.0 && self.timestamp.is_finite()) {
            return Err(invalid(format!("timestamp must be >= 0, got {}", self.timestamp)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(invalid(format!("object {i}: dimensions must be > 0, got {:?}", o.size)));
            }
            if o.center.iter().any(|c| !c.is_finite()) {
                return Err(invalid(format!("object {i}: center must be finite")));
            }
            if let Some(d) = o.density {
                if !(d > 0.0 && d.is_finite()) {
                    return Err(invalid(format!("object {i}: density must be > 0, got {d}")));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth for one labeled object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub label: ClassLabel,
    pub center: WorldPoint,
    pub size: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    /// Exact projected boxes (confidence 1), in object order, visible objects only.
    pub detections: Vec<Detection>,
    pub truth: Vec<TruthObject>,
}

/// Entry parameter of the segment `origin + t·dir` into the box, if it enters
/// for some `t` in `[0, t_max)`.
fn ray_box_entry(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3], t_max: f64) -> Option<f64> {
    let mut t0 = 0.0_f64;
    let mut t1 = t_max;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let a = (lo[i] - origin[i]) / dir[i];
        let b = (hi[i] - origin[i]) / dir[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
        if t0 > t1 {
            return None;
        }
    }
    (t0 < t_max).then_some(t0)
}

/// Faces of an axis-aligned box whose outward side contains `eye`, as
/// `(axis, coordinate)`.
fn visible_faces(eye: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Vec<(usize, f64)> {
    let mut faces = Vec::new();
    for axis in 0..3 {
        if eye[axis] < lo[axis] {
            faces.push((axis, lo[axis]));
        } else if eye[axis] > hi[axis] {
            faces.push((axis, hi[axis]));
        }
    }
    faces
}

#[allow(clippy::too_many_arguments)]
fn sample_object(
    obj: &ObjectSpec,
    index: usize,
    all: &[ObjectSpec],
    eye: [f64; 3],
    density: f64,
    noise: Option<&Normal<f64>>,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<WorldPoint>,
) {
    let (lo, hi) = obj.bounds();
    for (axis, coord) in visible_faces(eye, lo, hi) {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let area = (hi[a] - lo[a]) * (hi[b] - lo[b]);
        let n = (obj.density.unwrap_or(density) * area).round() as usize;
        for _ in 0..n {
            let mut p = [0.0; 3];
            p[axis] = coord;
            p[a] = rng.gen_range(lo[a]..=hi[a]);
            p[b] = rng.gen_range(lo[b]..=hi[b]);
            let d = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
            let range = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let dir = [d[0] / range, d[1] / range, d[2] / range];
            // the draw happens for every candidate so occlusion does not shift the stream
            let jitter = noise.map_or(0.0, |n| n.sample(rng));
            let hidden = all.iter().enumerate().any(|(j, other)| {
                if j == index {
                    return false;
                }
                let (olo, ohi) = other.bounds();
                ray_box_entry(eye, dir, olo, ohi, range - 1e-9).is_some()
            });
            if hidden {
                continue;
            }
            let r = (range + jitter).max(1e-6);
            out.push(WorldPoint::new(eye[0] + dir[0] * r, eye[1] + dir[1] * r, eye[2] + dir[2] * r));
        }
    }
}

/// Tight pixel box around the projected corners, clamped to the image. `None`
/// when a corner is behind the camera or nothing is left in view.
pub fn project_box(obj: &ObjectSpec, calib: &CalibrationBundle) -> Option<BBox> {
    let mut u = (f64::INFINITY, f64::NEG_INFINITY);
    let mut v = (f64::INFINITY, f64::NEG_INFINITY);
    for c in obj.corners() {
        let px = calib.project_world(&c).ok()?;
        u = (u.0.min(px.u), u.1.max(px.u));
        v = (v.0.min(px.v), v.1.max(px.v));
    }
    BBox::new(u.0, v.0, u.1, v.1).ok()?.clamp_to(calib.image_width(), calib.image_height())
}

/// Camera depth of the first surface of `obj` hit by the ray through the
/// center of `bbox`; the depth a perfect estimator would report for the box.
pub fn surface_depth_at_center(obj: &ObjectSpec, bbox: &BBox, calib: &CalibrationBundle) -> Option<f64> {
    let k = calib.intrinsics();
    let (u, v) = bbox.center();
    let dir_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    let origin = calib.camera_origin_world();
    let far = calib.camera_to_world_point(&crate::geometry::CameraPoint::new(dir_cam[0], dir_cam[1], dir_cam[2]));
    let dir = [far.x - origin.x, far.y - origin.y, far.z - origin.z];
    let (lo, hi) = obj.bounds();
    // `dir` spans one unit of camera depth, so the entry parameter is Z_c
    ray_box_entry([origin.x, origin.y, origin.z], dir, lo, hi, f64::INFINITY)
}

/// Renders one frame. Output is a pure function of the spec, the calibration
/// and `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, calib: &CalibrationBundle) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma validated"));
    let eye = calib.lidar_origin_world();
    let eye = [eye.x, eye.y, eye.z];

    let mut world = Vec::new();
    for (i, obj) in spec.objects.iter().enumerate() {
        sample_object(obj, i, &spec.objects, eye, spec.density, noise.as_ref(), &mut rng, &mut world);
    }
    let points = world.iter().map(|p| calib.world_to_lidar_point(p)).collect();
    let cloud = PointCloud::new(points, spec.timestamp).map_err(|e| invalid(e.to_string()))?;

    let mut box_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    box_rng.set_stream(1);
    let jitter = (spec.bbox_jitter > 0.0).then(|| Normal::new(0.0, spec.bbox_jitter).expect("validated"));
    let mut detections = Vec::new();
    let mut truth = Vec::new();
    for obj in &spec.objects {
        let Some(label) = obj.label else { continue };
        truth.push(TruthObject {
            label,
            center: WorldPoint::new(obj.center[0], obj.center[1], obj.center[2]),
            size: obj.size,
        });
        let Some(mut bbox) = project_box(obj, calib) else { continue };
        let dropped = box_rng.gen::<f64>() < spec.dropout;
        if let Some(j) = &jitter {
            let d: [f64; 4] = std::array::from_fn(|_| j.sample(&mut box_rng));
            let moved = BBox::new(bbox.u_min + d[0], bbox.v_min + d[1], bbox.u_max + d[2], bbox.v_max + d[3]);
            if let Some(b) = moved.ok().and_then(|b| b.clamp_to(calib.image_width(), calib.image_height())) {
                bbox = b;
            }
        }
        if !dropped {
            detections.push(Detection::ground_truth(label, bbox));
        }
    }
    Ok(SyntheticScene {
        cloud,
        detections,
        truth,
    })
}

// ---- scene families used by the benchmark suites ----

/// Background surfaces are sampled sparsely; only their depth matters.
pub const BACKGROUND_DENSITY: f64 = 20.0;

fn wall_behind(depth: f64) -> ObjectSpec {
    ObjectSpec {
        density: Some(BACKGROUND_DENSITY),
        ..ObjectSpec::clutter([depth, 0.0, 6.0], [0.5, 60.0, 12.0])
    }
}

fn boxes_overlap(a: &ObjectSpec, b: &ObjectSpec, calib: &CalibrationBundle) -> bool {
    match (project_box(a, calib), project_box(b, calib)) {
        (Some(x), Some(y)) => x.intersection(&y).is_some(),
        _ => true,
    }
}

/// A MiC and a human on the ground, neither hiding the other, in front of a
/// background wall. Positions are drawn from `seed`.
pub fn open_scene(seed: u64, calib: &CalibrationBundle) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    loop {
        let mic = ObjectSpec::labeled(
            ClassLabel::Mic,
            [rng.gen_range(10.0..20.0), rng.gen_range(-4.0..4.0), MIC_SIZE[2] / 2.0 + rng.gen_range(0.0..2.0)],
            MIC_SIZE,
        );
        let human = ObjectSpec::labeled(
            ClassLabel::Human,
            [rng.gen_range(5.0..15.0), rng.gen_range(-6.0..6.0), HUMAN_SIZE[2] / 2.0],
            HUMAN_SIZE,
        );
        if boxes_overlap(&mic, &human, calib) {
            continue;
        }
        return SceneSpec::new(vec![mic, human, wall_behind(35.0)], seed);
    }
}

/// A target partly hidden by a nearer object of the same class, in front of a
/// wall. Returns the spec and the index of the target object. Even seeds give a
/// human behind a human, odd seeds a MiC behind another MiC. The occluder covers
/// 20-60 % of the target's box and stands 1.5-4 m closer.
pub fn occluded_scene(seed: u64, calib: &CalibrationBundle) -> (SceneSpec, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let (label, size) = if seed.is_multiple_of(2) {
        (ClassLabel::Human, HUMAN_SIZE)
    } else {
        (ClassLabel::Mic, MIC_SIZE)
    };
    let range = if label == ClassLabel::Human { 8.0..18.0 } else { 14.0..25.0 };
    loop {
        let depth = rng.gen_range(range.clone());
        let target = ObjectSpec::labeled(label, [depth, rng.gen_range(-3.0..3.0), size[2] / 2.0], size);
        let gap = rng.gen_range(1.5..4.0) + size[0];
        let shift = rng.gen_range(-1.0..1.0) * size[1];
        let occluder = ObjectSpec::labeled(
            label,
            [depth - gap, target.center[1] + shift, size[2] / 2.0],
            size,
        );
        let wall = wall_behind(depth + rng.gen_range(3.0..12.0));
        let (Some(tb), Some(ob)) = (project_box(&target, calib), project_box(&occluder, calib)) else {
            continue;
        };
        let covered = tb.intersection_area(&ob) / tb.area();
        if !(0.2..=0.6).contains(&covered) {
            continue;
        }
        return (SceneSpec::new(vec![occluder, target, wall], seed), 1);
    }
}

// ---- lift replays ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightKey {
    pub t: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanPath {
    #[serde(default = "human_size")]
    pub size: [f64; 3],
    pub path: Vec<Waypoint>,
}

fn human_size() -> [f64; 3] {
    HUMAN_SIZE
}

fn mic_size() -> [f64; 3] {
    MIC_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    /// Ground position of the module center.
    pub position: [f64; 2],
    #[serde(default = "mic_size")]
    pub size: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudFormat {
    #[default]
    Ply,
    Csv,
}

/// Scripted lift: the module follows a piecewise-linear height profile while
/// humans walk piecewise-linear paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ten")]
    pub image_rate: f64,
    #[serde(default = "ten")]
    pub lidar_rate: f64,
    /// LiDAR clock lag behind the camera (s).
    #[serde(default = "lidar_offset")]
    pub lidar_offset: f64,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub bbox_jitter: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub cloud_format: CloudFormat,
    pub load: LoadSpec,
    pub lift: Vec<HeightKey>,
    #[serde(default)]
    pub humans: Vec<HumanPath>,
    #[serde(default)]
    pub clutter: Vec<ObjectSpec>,
}

fn ten() -> f64 {
    10.0
}

fn lidar_offset() -> f64 {
    0.01
}

fn piecewise<const N: usize>(keys: &[(f64, [f64; N])], t: f64) -> [f64; N] {
    if t <= keys[0].0 {
        return keys[0].1;
    }
    for w in keys.windows(2) {
        let ((t0, a), (t1, b)) = (w[0], w[1]);
        if t <= t1 {
            let s = (t - t0) / (t1 - t0);
            return std::array::from_fn(|i| a[i] + s * (b[i] - a[i]));
        }
    }
    keys[keys.len() - 1].1
}

fn check_times(times: impl Iterator<Item = f64>, what: &str) -> Result<(), SynthError> {
    let mut prev = f64::NEG_INFINITY;
    for t in times {
        if !(t.is_finite() && t > prev && t >= 0.0) {
            return Err(invalid(format!("{what} times must be >= 0 and strictly increasing")));
        }
        prev = t;
    }
    Ok(())
}

impl LiftSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [("image_rate", self.image_rate), ("lidar_rate", self.lidar_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.lidar_offset.is_finite() && self.lidar_offset >= 0.0) {
            return Err(invalid("lidar_offset must be >= 0"));
        }
        if self.lift.is_empty() {
            return Err(invalid("lift profile needs at least one key"));
        }
        check_times(self.lift.iter().map(|k| k.t), "lift")?;
        for (i, h) in self.humans.iter().enumerate() {
            if h.path.is_empty() {
                return Err(invalid(format!("human {i}: path is empty")));
            }
            check_times(h.path.iter().map(|w| w.t), &format!("human {i} path"))?;
        }
        // the per-frame scene carries the remaining checks
        self.scene_at(0.0, 0).validate()
    }

    pub fn duration(&self) -> f64 {
        self.lift[self.lift.len() - 1].t
    }

    pub fn height_at(&self, t: f64) -> f64 {
        let keys: Vec<(f64, [f64; 1])> = self.lift.iter().map(|k| (k.t, [k.height])).collect();
        piecewise(&keys, t)[0]
    }

    /// Scene at time `t`: module first, then humans, then clutter.
    pub fn scene_at(&self, t: f64, seed: u64) -> SceneSpec {
        let size = self.load.size;
        let mut objects = vec![ObjectSpec::labeled(
            ClassLabel::Mic,
            [self.load.position[0], self.load.position[1], size[2] / 2.0 + self.height_at(t)],
            size,
        )];
        for h in &self.humans {
            let keys: Vec<(f64, [f64; 2])> = h.path.iter().map(|w| (w.t, [w.x, w.y])).collect();
            let [x, y] = piecewise(&keys, t);
            objects.push(ObjectSpec::labeled(ClassLabel::Human, [x, y, h.size[2] / 2.0], h.size));
        }
        objects.extend(self.clutter.iter().copied());
        SceneSpec {
            objects,
            density: self.density,
            noise_sigma: self.noise_sigma,
            seed,
            timestamp: t,
            bbox_jitter: self.bbox_jitter,
            dropout: self.dropout,
        }
    }

    fn stamps(&self, rate: f64, offset: f64) -> Vec<f64> {
        let n = (self.duration() * rate + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| i as f64 / rate + offset)
            .filter(|t| *t <= self.duration() + 1e-9)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub timestamp: f64,
    pub objects: Vec<TruthObject>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TruthTrack {
    pub frames: Vec<TruthFrame>,
}

impl TruthTrack {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        io::read_json(path)
    }

    /// Module center over time.
    pub fn mic_track(&self) -> Vec<(f64, WorldPoint)> {
        self.frames
            .iter()
            .filter_map(|f| {
                let mic = f.objects.iter().find(|o| o.label == ClassLabel::Mic)?;
                Some((f.timestamp, mic.center))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftReplay {
    /// `(timestamp, detections)` per camera frame.
    pub images: Vec<(f64, Vec<Detection>)>,
    pub clouds: Vec<PointCloud>,
    pub truth: TruthTrack,
    pub cloud_format: CloudFormat,
}

/// Camera frames carry the projected boxes, LiDAR frames the sampled cloud.
/// Each LiDAR frame `i` is seeded with `seed ^ i`, each camera frame `j` with
/// `seed ^ j` on a separate stream, so frames can be rendered in parallel.
pub fn generate_lift(spec: &LiftSpec, calib: &CalibrationBundle) -> Result<LiftReplay, SynthError> {
    spec.validate()?;
    let image_ts = spec.stamps(spec.image_rate, 0.0);
    let cloud_ts = spec.stamps(spec.lidar_rate, spec.lidar_offset);

    let clouds = cloud_ts
        .par_iter()
        .enumerate()
        .map(|(i, t)| generate_scene(&spec.scene_at(*t, spec.seed ^ i as u64), calib).map(|s| s.cloud))
        .collect::<Result<Vec<_>, _>>()?;
    let frames = image_ts
        .par_iter()
        .enumerate()
        .map(|(j, t)| {
            let mut scene = spec.scene_at(*t, spec.seed ^ j as u64);
            // boxes need no points
            scene.density = 1e-9;
            let s = generate_scene(&scene, calib)?;
            Ok((
                (*t, s.detections),
                TruthFrame {
                    timestamp: *t,
                    objects: s.truth,
                },
            ))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let (images, truth_frames) = frames.into_iter().unzip();
    Ok(LiftReplay {
        images,
        clouds,
        truth: TruthTrack { frames: truth_frames },
        cloud_format: spec.cloud_format,
    })
}

/// Writes `manifest.json`, `calib.toml`, `truth.json`, `detections/NNNNNN.json`
/// and `clouds/NNNNNN.{ply,csv}` under `dir`.
pub fn write_replay(dir: &Path, replay: &LiftReplay, calib: &CalibrationBundle) -> Result<(), SynthError> {
    let ext = match replay.cloud_format {
        CloudFormat::Ply => "ply",
        CloudFormat::Csv => "csv",
    };
    let mut frames = Vec::new();
    for (i, (ts, dets)) in replay.images.iter().enumerate() {
        let rel = format!("detections/{i:06}.json");
        io::write_detections(&dir.join(&rel), dets)?;
        frames.push(ManifestFrame {
            timestamp: *ts,
            detections: Some(rel),
            cloud: None,
            cloud_timestamp: None,
        });
    }
    replay
        .clouds
        .par_iter()
        .enumerate()
        .try_for_each(|(i, c)| io::write_cloud(&dir.join(format!("clouds/{i:06}.{ext}")), c))?;
    for (i, c) in replay.clouds.iter().enumerate() {
        frames.push(ManifestFrame {
            timestamp: c.timestamp(),
            detections: None,
            cloud: Some(format!("clouds/{i:06}.{ext}")),
            cloud_timestamp: None,
        });
    }
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Manifest {
        frames,
        base_dir: dir.to_path_buf(),
    }
    .save(&dir.join("manifest.json"))?;
    io::save_calibration(&dir.join("calib.toml"), calib)?;
    io::write_json(&dir.join("truth.json"), &replay.truth)?;
    Ok(())
}
