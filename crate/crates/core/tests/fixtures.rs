use std::path::{Path, PathBuf};

use approx::assert_abs_diff_eq;
use liftguard::geometry::{pixel_depth_to_world, DepthPixel, RigidTransform, WorldPoint};
use liftguard::io::{self, IoError};
use liftguard::safety::evaluate_localization;
use liftguard::{CalibrationBundle, ClassLabel};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn assert_orthonormal(t: &RigidTransform) {
    let r = t.rotation();
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            assert_abs_diff_eq!(dot, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-6);
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    assert_abs_diff_eq!(det, 1.0, epsilon = 1e-6);
}

#[test]
fn calibration_fixtures_load_with_proper_rotations() {
    for name in ["calib_d455.toml", "calib_hikrobot.toml"] {
        let calib = io::load_calibration(&fixture(name)).unwrap();
        assert_orthonormal(calib.lidar_to_camera());
        assert_orthonormal(calib.world_to_lidar());
    }
    let d455 = io::load_calibration(&fixture("calib_d455.toml")).unwrap();
    assert_eq!((d455.image_width(), d455.image_height()), (1280, 800));
    assert_eq!(d455.intrinsics().fx, 631.1799);
    let hik = io::load_calibration(&fixture("calib_hikrobot.toml")).unwrap();
    assert_eq!((hik.image_width(), hik.image_height()), (5472, 3648));
    assert_eq!(hik.intrinsics().cy, 1851.2654);
}

#[test]
fn orthonormalized_rotation_stays_close_to_printed_values() {
    for (fixed, printed) in [
        ("calib_d455.toml", "calib_d455_printed.toml"),
        ("calib_hikrobot.toml", "calib_hikrobot_printed.toml"),
    ] {
        let a: toml::Value = toml::from_str(&std::fs::read_to_string(fixture(fixed)).unwrap()).unwrap();
        let b: toml::Value = toml::from_str(&std::fs::read_to_string(fixture(printed)).unwrap()).unwrap();
        let rows = |v: &toml::Value| -> Vec<f64> {
            v["lidar_to_camera"]
                .as_array()
                .unwrap()
                .iter()
                .flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_float().unwrap()).collect::<Vec<_>>())
                .collect()
        };
        for (x, y) in rows(&a).iter().zip(rows(&b)) {
            assert!((x - y).abs() < 1e-4, "{fixed}: {x} vs {y}");
        }
    }
}

#[test]
fn printed_rotations_are_rejected() {
    for name in ["calib_d455_printed.toml", "calib_hikrobot_printed.toml"] {
        let err = io::load_calibration(&fixture(name)).unwrap_err();
        assert!(matches!(err, IoError::Geometry { .. }), "{name}: {err}");
        assert!(err.to_string().contains(name), "diagnostic should name the file: {err}");
    }
}

#[test]
fn principal_point_back_projects_through_inverse_extrinsics() {
    let file = io::load_calibration(&fixture("calib_d455.toml")).unwrap();
    let calib = CalibrationBundle::new(
        *file.intrinsics(),
        *file.lidar_to_camera(),
        RigidTransform::identity(),
        file.image_width(),
        file.image_height(),
    )
    .unwrap();
    let k = calib.intrinsics();
    let p = pixel_depth_to_world(&DepthPixel::new(k.cx, k.cy, 2.5), &calib).unwrap();

    // R^T (p_c - t) written out by hand
    let r = file.lidar_to_camera().rotation();
    let t = file.lidar_to_camera().translation();
    let d = [-t[0], -t[1], 2.5 - t[2]];
    let expected: Vec<f64> = (0..3).map(|i| (0..3).map(|j| r[j][i] * d[j]).sum()).collect();
    assert_abs_diff_eq!(p.x, expected[0], epsilon = 1e-9);
    assert_abs_diff_eq!(p.y, expected[1], epsilon = 1e-9);
    assert_abs_diff_eq!(p.z, expected[2], epsilon = 1e-9);
    // the optical axis leans forward and upward from the LiDAR
    assert!(p.x > 2.0 && p.z > 0.5);
}

#[test]
fn calibration_survives_a_toml_round_trip() {
    let calib = io::load_calibration(&fixture("calib_hikrobot.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calib.toml");
    io::save_calibration(&path, &calib).unwrap();
    let back = io::load_calibration(&path).unwrap();
    let w = WorldPoint::new(14.0, -2.0, 3.0);
    let (a, b) = (calib.project_world(&w).unwrap(), back.project_world(&w).unwrap());
    assert_abs_diff_eq!(a.u, b.u, epsilon = 1e-9);
    assert_abs_diff_eq!(a.v, b.v, epsilon = 1e-9);
    assert_abs_diff_eq!(a.depth, b.depth, epsilon = 1e-12);
}

#[test]
fn localization_tables_reproduce_row_errors() {
    for (name, label, rows) in [
        ("localization_mic.csv", ClassLabel::Mic, 10),
        ("localization_human.csv", ClassLabel::Human, 18),
    ] {
        let pairs = io::read_localization_pairs(&fixture(name)).unwrap();
        assert_eq!(pairs.len(), rows);
        let report = evaluate_localization(&pairs).unwrap();
        let class = report.class(label).unwrap();
        assert_eq!(class.count, rows);

        // the last column carries the per-row error as printed, 4 decimals
        let text = std::fs::read_to_string(fixture(name)).unwrap();
        let printed: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        let mut agree = 0;
        for ((_, e), p) in class.errors.iter().zip(&printed) {
            if (e - p).abs() <= 1e-4 {
                agree += 1;
            }
        }
        // two human rows in the source table carry transposed digits
        let expected = if label == ClassLabel::Mic { rows } else { rows - 2 };
        assert_eq!(agree, expected, "{name}");
    }
}

#[test]
fn localization_pairs_round_trip_through_csv() {
    let pairs = io::read_localization_pairs(&fixture("localization_human.csv")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.csv");
    io::write_localization_pairs(&path, &pairs).unwrap();
    assert_eq!(io::read_localization_pairs(&path).unwrap(), pairs);
}
