//! File formats: calibration (TOML), point clouds (PLY / CSV), per-frame
//! detections (JSON), the replay manifest (JSON), depth-image export (16-bit PNG)
//! and localization pair tables (CSV).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ply_rs::parser::Parser;
use ply_rs::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType,
    ScalarType,
};
use ply_rs::writer::Writer;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{ClassLabel, Detection};
use crate::geometry::{CalibrationBundle, GeometryError, Intrinsics, LidarPoint, RigidTransform, WorldPoint};
use crate::pointcloud::{DepthImage, PointCloud, PointCloudError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Geometry {
        path: PathBuf,
        #[source]
        source: GeometryError,
    },
    #[error("{path}: {source}")]
    Cloud {
        path: PathBuf,
        #[source]
        source: PointCloudError,
    },
    #[error("{path}: unsupported point-cloud extension (expected .ply or .csv)")]
    UnknownCloudFormat { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, message: impl ToString) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    toml::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

// ---- calibration ----

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ImageSize {
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    lidar_to_camera: [[f64; 4]; 4],
    world_to_lidar: [[f64; 4]; 4],
    intrinsics: Intrinsics,
    image_size: ImageSize,
}

fn calibration_from_file(f: CalibrationFile) -> Result<CalibrationBundle, GeometryError> {
    CalibrationBundle::new(
        f.intrinsics,
        RigidTransform::from_homogeneous(&f.lidar_to_camera)?,
        RigidTransform::from_homogeneous(&f.world_to_lidar)?,
        f.image_size.width,
        f.image_size.height,
    )
}

pub fn parse_calibration(text: &str, origin: &Path) -> Result<CalibrationBundle, IoError> {
    let file: CalibrationFile = toml::from_str(text).map_err(|e| parse_err(origin, e))?;
    calibration_from_file(file).map_err(|source| IoError::Geometry {
        path: origin.to_path_buf(),
        source,
    })
}

pub fn load_calibration(path: &Path) -> Result<CalibrationBundle, IoError> {
    parse_calibration(&read_text(path)?, path)
}

pub fn calibration_to_toml(calib: &CalibrationBundle) -> String {
    let file = CalibrationFile {
        lidar_to_camera: calib.lidar_to_camera().to_homogeneous(),
        world_to_lidar: calib.world_to_lidar().to_homogeneous(),
        intrinsics: *calib.intrinsics(),
        image_size: ImageSize {
            width: calib.image_width(),
            height: calib.image_height(),
        },
    };
    toml::to_string(&file).expect("calibration is always representable as TOML")
}

pub fn save_calibration(path: &Path, calib: &CalibrationBundle) -> Result<(), IoError> {
    write_bytes(path, calibration_to_toml(calib).as_bytes())
}

// ---- point clouds ----

fn cloud_err(path: &Path) -> impl FnOnce(PointCloudError) -> IoError + '_ {
    move |source| IoError::Cloud {
        path: path.to_path_buf(),
        source,
    }
}

fn coordinate(el: &DefaultElement, key: &str, path: &Path, index: usize) -> Result<f64, IoError> {
    match el.get(key) {
        Some(Property::Float(v)) => Ok(*v as f64),
        Some(Property::Double(v)) => Ok(*v),
        Some(other) => Err(parse_err(path, format!("vertex {index}: property {key} is not a float ({other:?})"))),
        None => Err(parse_err(path, format!("vertex {index}: missing property {key}"))),
    }
}

pub fn read_cloud_ply(path: &Path, timestamp: f64) -> Result<PointCloud, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let ply = Parser::<DefaultElement>::new()
        .read_ply(&mut reader)
        .map_err(|e| parse_err(path, e))?;
    let vertices = ply.payload.get("vertex").map(Vec::as_slice).unwrap_or_default();
    let points = vertices
        .iter()
        .enumerate()
        .map(|(i, el)| {
            Ok(LidarPoint::new(
                coordinate(el, "x", path, i)?,
                coordinate(el, "y", path, i)?,
                coordinate(el, "z", path, i)?,
            ))
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    PointCloud::new(points, timestamp).map_err(cloud_err(path))
}

/// Binary little-endian PLY with `double` x/y/z, so clouds round-trip exactly.
pub fn write_cloud_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let mut vertex = ElementDef::new("vertex".to_string());
    for axis in ["x", "y", "z"] {
        vertex.properties.add(PropertyDef::new(
            axis.to_string(),
            PropertyType::Scalar(ScalarType::Double),
        ));
    }
    ply.header.elements.add(vertex);
    let elements = cloud
        .points()
        .iter()
        .map(|p| {
            let mut el = DefaultElement::new();
            el.insert("x".to_string(), Property::Double(p.x));
            el.insert("y".to_string(), Property::Double(p.y));
            el.insert("z".to_string(), Property::Double(p.z));
            el
        })
        .collect();
    ply.payload.insert("vertex".to_string(), elements);
    let mut buf = Vec::new();
    Writer::new()
        .write_ply(&mut buf, &mut ply)
        .map_err(|e| parse_err(path, e))?;
    write_bytes(path, &buf)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvPoint {
    x: f64,
    y: f64,
    z: f64,
}

/// `x,y,z` per line, meters. A header row is optional.
pub fn read_cloud_csv(path: &Path, timestamp: f64) -> Result<PointCloud, IoError> {
    let text = read_text(path)?;
    let has_header = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim().starts_with(|c: char| c.is_ascii_alphabetic()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut points = Vec::new();
    for (i, row) in reader.deserialize::<(f64, f64, f64)>().enumerate() {
        let (x, y, z) = row.map_err(|e| parse_err(path, format!("row {i}: {e}")))?;
        points.push(LidarPoint::new(x, y, z));
    }
    PointCloud::new(points, timestamp).map_err(cloud_err(path))
}

pub fn write_cloud_csv(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for p in cloud.points() {
        writer
            .serialize(CsvPoint { x: p.x, y: p.y, z: p.z })
            .map_err(|e| parse_err(path, e))?;
    }
    let buf = writer.into_inner().map_err(|e| parse_err(path, e))?;
    write_bytes(path, &buf)
}

/// Dispatches on the file extension (`.ply` or `.csv`).
pub fn read_cloud(path: &Path, timestamp: f64) -> Result<PointCloud, IoError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => read_cloud_ply(path, timestamp),
        Some("csv") => read_cloud_csv(path, timestamp),
        _ => Err(IoError::UnknownCloudFormat {
            path: path.to_path_buf(),
        }),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => write_cloud_ply(path, cloud),
        Some("csv") => write_cloud_csv(path, cloud),
        _ => Err(IoError::UnknownCloudFormat {
            path: path.to_path_buf(),
        }),
    }
}

// ---- detections ----

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, IoError> {
    read_json(path)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<(), IoError> {
    write_json(path, detections)
}

// ---- manifest ----

/// One timestamped entry of a replay. An entry carrying `detections` is an image
/// frame; one carrying `cloud` is a LiDAR sweep (stamped `cloud_timestamp` if
/// given, else `timestamp`). An entry may carry both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_timestamp: Option<f64>,
}

/// Time-ordered replay index. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<ManifestFrame>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let mut m: Manifest = read_json(path)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_json(path, self)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    /// Image timestamps with their detection file, in manifest order.
    pub fn image_entries(&self) -> Vec<(f64, PathBuf)> {
        self.frames
            .iter()
            .filter_map(|f| Some((f.timestamp, self.resolve(f.detections.as_ref()?))))
            .collect()
    }

    /// Cloud timestamps with their cloud file, in manifest order.
    pub fn cloud_entries(&self) -> Vec<(f64, PathBuf)> {
        self.frames
            .iter()
            .filter_map(|f| {
                let path = self.resolve(f.cloud.as_ref()?);
                Some((f.cloud_timestamp.unwrap_or(f.timestamp), path))
            })
            .collect()
    }
}

// ---- depth export ----

/// Millimeter-quantized 16-bit grayscale PNG; empty pixels are 0 and depths
/// beyond 65.535 m saturate.
pub fn write_depth_png(path: &Path, img: &DepthImage) -> Result<(), IoError> {
    let mut out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(img.width(), img.height());
    for (col, row, depth) in img.populated() {
        let mm = (depth * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16;
        out.put_pixel(col, row, image::Luma([mm]));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    out.write_to(&mut writer, image::ImageFormat::Png)
        .map_err(|e| parse_err(path, e))?;
    writer.flush().map_err(io_err(path))
}

/// Reads an exported depth PNG back as meters.
pub fn read_depth_png(path: &Path, timestamp: f64) -> Result<DepthImage, IoError> {
    let decoded = image::open(path).map_err(|e| parse_err(path, e))?.into_luma16();
    let mut img = DepthImage::empty(decoded.width(), decoded.height(), timestamp);
    for (col, row, px) in decoded.enumerate_pixels() {
        if px.0[0] > 0 {
            img.splat_min(col, row, px.0[0] as f64 / 1000.0);
        }
    }
    Ok(img)
}

// ---- localization pairs ----

/// One detected/ground-truth world position pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationPair {
    pub frame: String,
    pub class: ClassLabel,
    pub truth: WorldPoint,
    pub detected: WorldPoint,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    frame: String,
    class: ClassLabel,
    truth_x: f64,
    truth_y: f64,
    truth_z: f64,
    det_x: f64,
    det_y: f64,
    det_z: f64,
}

/// CSV with header `frame,class,truth_x,truth_y,truth_z,det_x,det_y,det_z`.
pub fn read_localization_pairs(path: &Path) -> Result<Vec<LocalizationPair>, IoError> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    reader
        .deserialize::<PairRow>()
        .enumerate()
        .map(|(i, row)| {
            let r = row.map_err(|e| parse_err(path, format!("row {i}: {e}")))?;
            Ok(LocalizationPair {
                frame: r.frame,
                class: r.class,
                truth: WorldPoint::new(r.truth_x, r.truth_y, r.truth_z),
                detected: WorldPoint::new(r.det_x, r.det_y, r.det_z),
            })
        })
        .collect()
}

pub fn write_localization_pairs(path: &Path, pairs: &[LocalizationPair]) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for p in pairs {
        writer
            .serialize(PairRow {
                frame: p.frame.clone(),
                class: p.class,
                truth_x: p.truth.x,
                truth_y: p.truth.y,
                truth_z: p.truth.z,
                det_x: p.detected.x,
                det_y: p.detected.y,
                det_z: p.detected.z,
            })
            .map_err(|e| parse_err(path, e))?;
    }
    let buf = writer.into_inner().map_err(|e| parse_err(path, e))?;
    write_bytes(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;

    fn cloud() -> PointCloud {
        PointCloud::new(
            vec![
                LidarPoint::new(1.0, 2.0, 3.0),
                LidarPoint::new(-0.1, 1e-7, 12.345678901234),
            ],
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn ply_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_cloud(&path, &cloud()).unwrap();
        assert_eq!(read_cloud(&path, 0.5).unwrap(), cloud());
    }

    #[test]
    fn ascii_float_ply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n0.5 0.25 4\n",
        )
        .unwrap();
        let c = read_cloud(&path, 0.0).unwrap();
        assert_eq!(c.points()[1], LidarPoint::new(0.5, 0.25, 4.0));
    }

    #[test]
    fn csv_round_trip_and_headerless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_cloud(&path, &cloud()).unwrap();
        assert_eq!(read_cloud(&path, 0.5).unwrap(), cloud());

        let bare = dir.path().join("bare.csv");
        fs::write(&bare, "1,2,3\n4, 5, 6\n").unwrap();
        assert_eq!(read_cloud(&bare, 0.0).unwrap().len(), 2);
        fs::write(&bare, "1,2\n").unwrap();
        assert!(read_cloud(&bare, 0.0).is_err());
        assert!(matches!(
            read_cloud(&dir.path().join("x.xyz"), 0.0),
            Err(IoError::UnknownCloudFormat { .. })
        ));
    }

    #[test]
    fn calibration_round_trip() {
        let calib = CalibrationBundle::new(
            Intrinsics::new(600.0, 601.0, 320.0, 240.0).unwrap(),
            RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 0.3, [0.1, 0.2, 0.3]),
            RigidTransform::from_translation([0.0, 0.0, -1.5]),
            640,
            480,
        )
        .unwrap();
        let text = calibration_to_toml(&calib);
        let back = parse_calibration(&text, Path::new("mem")).unwrap();
        assert_eq!(back, calib);
    }

    #[test]
    fn calibration_rejects_bad_rotation() {
        let text = r#"
lidar_to_camera = [[1.0, 0.1, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
world_to_lidar = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
[intrinsics]
fx = 1.0
fy = 1.0
cx = 0.0
cy = 0.0
[image_size]
width = 10
height = 10
"#;
        assert!(matches!(
            parse_calibration(text, Path::new("bad.toml")),
            Err(IoError::Geometry { .. })
        ));
    }

    #[test]
    fn manifest_paths_resolve_against_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(
            &path,
            r#"{"frames":[{"timestamp":0.0,"detections":"d/0.json"},{"timestamp":0.01,"cloud":"c/0.ply","cloud_timestamp":0.02}]}"#,
        )
        .unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.image_entries(), vec![(0.0, dir.path().join("d/0.json"))]);
        assert_eq!(m.cloud_entries(), vec![(0.02, dir.path().join("c/0.ply"))]);
    }

    #[test]
    fn depth_png_quantizes_to_millimeters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut img = DepthImage::empty(4, 3, 0.0);
        img.splat_min(1, 2, 12.3456);
        write_depth_png(&path, &img).unwrap();
        let back = read_depth_png(&path, 0.0).unwrap();
        assert_eq!(back.populated_count(), 1);
        assert_eq!(back.get(1, 2), Some(12.346));
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let dets = vec![Detection::new(ClassLabel::Hook, BBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), 0.75).unwrap()];
        write_detections(&path, &dets).unwrap();
        assert_eq!(read_detections(&path).unwrap(), dets);
    }

    #[test]
    fn pairs_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let pairs = vec![LocalizationPair {
            frame: "PC1".into(),
            class: ClassLabel::Mic,
            truth: WorldPoint::new(1.0, 2.0, 3.0),
            detected: WorldPoint::new(1.5, 2.0, 3.0),
        }];
        write_localization_pairs(&path, &pairs).unwrap();
        assert_eq!(read_localization_pairs(&path).unwrap(), pairs);
    }
}
