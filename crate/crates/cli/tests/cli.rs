use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_liftguard"));
    c.env_remove("LIFTGUARD_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn liftguard")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two-second lift, sparse clouds; `walker` puts a human inside the zone
/// from t = 0.5 to 1.0.
fn short_spec(walker: bool) -> String {
    let path = if walker {
        "[{ t = 0.0, x = 10.0, y = 6.0 }, { t = 0.4, x = 10.0, y = 6.0 }, { t = 0.5, x = 10.0, y = 1.5 }, \
         { t = 1.0, x = 10.0, y = 1.5 }, { t = 1.1, x = 10.0, y = 6.0 }]"
    } else {
        "[{ t = 0.0, x = 8.0, y = 6.0 }]"
    };
    format!(
        "seed = 11\ndensity = 150.0\nload = {{ position = [12.0, 0.0] }}\n\
         lift = [{{ t = 0.0, height = 0.0 }}, {{ t = 2.0, height = 0.32 }}]\n\n[[humans]]\npath = {path}\n"
    )
}

fn synth(dir: &Path, spec_text: &str) -> PathBuf {
    let spec = dir.join("spec.toml");
    fs::write(&spec, spec_text).unwrap();
    let out = dir.join("replay");
    let o = run(&["synth", p(&spec), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn replay_without_intruders_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let replay = synth(tmp.path(), &short_spec(false));
    let out = tmp.path().join("out");
    let o = run(&[
        "replay",
        "--manifest",
        p(&replay.join("manifest.json")),
        "--out",
        p(&out),
        "--truth",
        p(&replay.join("truth.json")),
        "--format",
        "records",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["alarms_raised"], 0);
    assert_eq!(summary["intruder_frames"], 0);
    assert_eq!(summary, serde_json::from_str::<Value>(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap());
    let classes = summary["localization"]["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 2);
    assert!(summary["wall_time_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn replay_with_intrusion_exits_two_and_counts_match_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let replay = synth(tmp.path(), &short_spec(true));
    let out = tmp.path().join("out");
    let o = run(&[
        "replay",
        "--manifest",
        p(&replay.join("manifest.json")),
        "--calib",
        p(&replay.join("calib.toml")),
        "--out",
        p(&out),
        "--format",
        "records",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["alarms_raised"], 1);

    let log = fs::read_to_string(out.join("events.ndjson")).unwrap();
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let frames: Vec<&Value> = events.iter().filter(|e| e["type"] == "frame").collect();
    assert_eq!(frames.len() as u64, summary["frames_processed"].as_u64().unwrap());
    let intruder = frames.iter().filter(|e| !e["intruders"].as_array().unwrap().is_empty()).count();
    assert_eq!(intruder as u64, summary["intruder_frames"].as_u64().unwrap());
    let commands: Vec<&str> = events
        .iter()
        .filter(|e| e["type"] == "command")
        .map(|e| e["command"].as_str().unwrap())
        .collect();
    assert_eq!(commands.iter().filter(|c| **c == "audible_on").count(), 1);
    let stamps: Vec<f64> = frames.iter().map(|e| e["ts"].as_f64().unwrap()).collect();
    assert!(stamps.windows(2).all(|w| w[0] < w[1]), "log must be in frame order");
}

#[test]
fn missing_calibration_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let replay = synth(tmp.path(), &short_spec(false));
    let missing = tmp.path().join("nowhere/calib.toml");
    let o = run(&[
        "replay",
        "--manifest",
        p(&replay.join("manifest.json")),
        "--calib",
        p(&missing),
        "--out",
        p(&tmp.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

#[test]
fn bad_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let replay = synth(tmp.path(), &short_spec(false));
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "[zone]\nradius = -1.0\n").unwrap();
    let o = run(&[
        "replay",
        "--manifest",
        p(&replay.join("manifest.json")),
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("zone.radius"), "{}", stderr(&o));
}

fn write_frames(dir: &Path, frames: &[&str]) {
    fs::create_dir_all(dir).unwrap();
    for (i, f) in frames.iter().enumerate() {
        fs::write(dir.join(format!("{i:03}.json")), f).unwrap();
    }
}

const GT: [&str; 2] = [
    r#"[{"class": "human", "bbox": [10, 10, 50, 120], "confidence": 1.0},
        {"class": "mic", "bbox": [200, 100, 600, 400], "confidence": 1.0}]"#,
    r#"[{"class": "hook", "bbox": [300, 20, 340, 80], "confidence": 1.0}]"#,
];

#[test]
fn ground_truth_against_itself_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    write_frames(&tmp.path().join("gt"), &GT);
    let o = run(&[
        "eval-detect",
        "--detections",
        p(&tmp.path().join("gt")),
        "--ground-truth",
        p(&tmp.path().join("gt")),
        "--iou-thresh",
        "0.75",
        "--iou-thresh",
        "0.9",
        "--format",
        "records",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["classes"].as_array().unwrap().len(), 3);
    for c in r["classes"].as_array().unwrap() {
        for key in ["precision", "recall", "ap50", "ap50_95"] {
            assert_eq!(c[key], 1.0, "{key}");
        }
        assert_eq!(c["ap_at"].as_array().unwrap().len(), 2);
    }
    assert_eq!(r["map50_95"], 1.0);

    let table = run(&["eval-detect", "--detections", p(&tmp.path().join("gt")), "--ground-truth", p(&tmp.path().join("gt"))]);
    let text = stdout(&table);
    assert!(text.lines().any(|l| l.starts_with("all") && l.contains("1.0000")), "{text}");
}

#[test]
fn empty_detections_score_zero() {
    let tmp = tempfile::tempdir().unwrap();
    write_frames(&tmp.path().join("gt"), &GT);
    write_frames(&tmp.path().join("det"), &["[]", "[]"]);
    let o = run(&[
        "eval-detect",
        "--detections",
        p(&tmp.path().join("det")),
        "--ground-truth",
        p(&tmp.path().join("gt")),
        "--format",
        "records",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["mean_precision"], 0.0);
    assert_eq!(r["mean_recall"], 0.0);
    assert_eq!(r["map50"], 0.0);
}

#[test]
fn mismatched_frame_sets_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    write_frames(&tmp.path().join("gt"), &GT);
    write_frames(&tmp.path().join("det"), &["[]"]);
    let o = run(&["eval-detect", "--detections", p(&tmp.path().join("det")), "--ground-truth", p(&tmp.path().join("gt"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("001.json"), "{}", stderr(&o));

    fs::write(tmp.path().join("det/001.json"), r#"[{"class": "crane", "bbox": [0, 0, 1, 1], "confidence": 1.0}]"#).unwrap();
    let o = run(&["eval-detect", "--detections", p(&tmp.path().join("det")), "--ground-truth", p(&tmp.path().join("gt"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn localization_table_fixture_mean() {
    let o = run(&["eval-localize", "--pairs", p(&fixture("localization_mic.csv")), "--format", "records"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let mean = r["classes"][0]["mean_error"].as_f64().unwrap();
    assert!((mean - 1.5640).abs() <= 1e-4, "{mean}");
    assert_eq!(r["pairs"].as_array().unwrap().len(), 10);

    let table = stdout(&run(&["eval-localize", "--pairs", p(&fixture("localization_mic.csv"))]));
    assert!(table.lines().any(|l| l.starts_with("mean") && l.ends_with("1.5640")), "{table}");
}

#[test]
fn perfect_localization_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("pairs.csv");
    fs::write(
        &csv,
        "frame,class,truth_x,truth_y,truth_z,det_x,det_y,det_z\n\
         a,human,1,2,0.85,1,2,0.85\nb,mic,12,0,1.5,12,0,1.5\n",
    )
    .unwrap();
    let o = run(&["eval-localize", "--pairs", p(&csv), "--format", "records"]);
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    for c in r["classes"].as_array().unwrap() {
        assert_eq!(c["mean_error"], 0.0);
    }
}

#[test]
fn run_and_truth_must_align() {
    let tmp = tempfile::tempdir().unwrap();
    let replay = synth(tmp.path(), &short_spec(false));
    let out = tmp.path().join("out");
    run(&["replay", "--manifest", p(&replay.join("manifest.json")), "--out", p(&out)]);
    let ok = run(&[
        "eval-localize",
        "--run",
        p(&out.join("events.ndjson")),
        "--truth",
        p(&replay.join("truth.json")),
    ]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("human"));

    fs::write(tmp.path().join("other.json"), r#"{"frames": [{"timestamp": 99.0, "objects": []}]}"#).unwrap();
    let bad = run(&[
        "eval-localize",
        "--run",
        p(&out.join("events.ndjson")),
        "--truth",
        p(&tmp.path().join("other.json")),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("no ground truth"), "{}", stderr(&bad));
}

#[test]
fn synth_is_reproducible_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        let o = run(&["synth", "--out", p(dir), "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(tree(&a), tree(&b));
    run(&["synth", "--out", p(&c), "--seed", "8"]);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn synth_writes_one_box_per_visible_human() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = "seed = 1\ndensity = 50.0\nload = { position = [14.0, -2.0] }\n\
                lift = [{ t = 0.0, height = 0.0 }, { t = 0.5, height = 0.1 }]\n\n\
                [[humans]]\npath = [{ t = 0.0, x = 8.0, y = 4.0 }]\n\n\
                [[humans]]\npath = [{ t = 0.0, x = 9.0, y = 2.0 }, { t = 0.5, x = 9.0, y = 3.0 }]\n";
    let replay = synth(tmp.path(), spec);
    let names: BTreeSet<_> = fs::read_dir(replay.join("detections")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(names.len(), 6);
    for f in names {
        let dets: Vec<Value> = serde_json::from_str(&fs::read_to_string(&f).unwrap()).unwrap();
        assert_eq!(dets.iter().filter(|d| d["class"] == "human").count(), 2, "{}", f.display());
        assert_eq!(dets.iter().filter(|d| d["class"] == "mic").count(), 1);
    }
}

#[test]
fn zero_density_spec_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, "density = 0.0\nload = { position = [12.0, 0.0] }\nlift = [{ t = 0.0, height = 0.0 }]\n").unwrap();
    let o = run(&["synth", p(&spec), "--out", p(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("invalid spec"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

/// 100x100 pinhole looking along the LiDAR x axis.
const SIMPLE_CALIB: &str = "lidar_to_camera = [[0, -1, 0, 0], [0, 0, -1, 0], [1, 0, 0, 0], [0, 0, 0, 1]]\n\
world_to_lidar = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]\n\
intrinsics = { fx = 100.0, fy = 100.0, cx = 50.0, cy = 50.0 }\n\
image_size = { width = 100, height = 100 }\n";

fn depth_count(dir: &Path, cloud_csv: &str) -> Output {
    let calib = dir.join("calib.toml");
    fs::write(&calib, SIMPLE_CALIB).unwrap();
    let cloud = dir.join("cloud.csv");
    fs::write(&cloud, cloud_csv).unwrap();
    run(&["depth-image", p(&cloud), "--calib", p(&calib), "--out", p(&dir.join("depth.png")), "--format", "records"])
}

fn populated(o: &Output) -> u64 {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_str::<Value>(&stdout(o)).unwrap()["populated"].as_u64().unwrap()
}

#[test]
fn depth_image_of_one_point() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(populated(&depth_count(tmp.path(), "x,y,z\n4.0,0.5,-0.25\n")), 1);
    assert!(tmp.path().join("depth.png").exists());
}

#[test]
fn depth_image_of_empty_cloud() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(populated(&depth_count(tmp.path(), "x,y,z\n")), 0);
}

#[test]
fn depth_image_of_wall_matches_pixel_oracle() {
    // wall at x = 5 m, 7 x 3 m, 4 cm grid; some of it falls outside the view
    let mut csv = String::from("x,y,z\n");
    let mut pixels = BTreeSet::new();
    for i in 0..=175 {
        for j in 0..=75 {
            let (y, z) = (-3.5 + 0.04 * i as f64, -1.0 + 0.04 * j as f64);
            csv.push_str(&format!("5.0,{y},{z}\n"));
            let (u, v) = (100.0 * -y / 5.0 + 50.0, 100.0 * -z / 5.0 + 50.0);
            if (0.0..100.0).contains(&u) && (0.0..100.0).contains(&v) {
                pixels.insert((u.floor() as i64, v.floor() as i64));
            }
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    let n = populated(&depth_count(tmp.path(), &csv));
    assert_eq!(n, pixels.len() as u64);
    assert!(n > 1000 && n < 100 * 100);
}

#[test]
fn log_level_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["synth", "--out", p(&tmp.path().join("r")), "--seed", "2"])
        .env("LIFTGUARD_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stderr(&o).contains("wrote replay"), "{}", stderr(&o));
    let quiet = run(&["synth", "--out", p(&tmp.path().join("q")), "--seed", "2"]);
    assert!(!stderr(&quiet).contains("wrote replay"));
}
