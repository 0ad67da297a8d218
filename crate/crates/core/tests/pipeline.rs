use std::path::{Path, PathBuf};

use liftguard::config::PipelineConfig;
use liftguard::depth_cluster::{
    averaging_depth, estimate_target_depth, extract_bbox_depths, kmeans_1d, occlusion_check, remove_depth_outliers,
};
use liftguard::frame_sync::FramePair;
use liftguard::io::{self, Manifest};
use liftguard::pointcloud::render_depth_image;
use liftguard::replay::{pairs_from_run, read_events, run_replay, Event, RunSummary};
use liftguard::safety::{evaluate_localization, process_frame, AlarmCommand, FrameStatus};
use liftguard::synth::{
    generate_lift, generate_scene, occluded_scene, open_scene, surface_depth_at_center,
    write_replay, LiftSpec, SyntheticScene,
};
use liftguard::{CalibrationBundle, ClassLabel};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn d455() -> CalibrationBundle {
    io::load_calibration(&fixture("calib_d455.toml")).unwrap()
}

fn frame(scene: &SyntheticScene) -> FramePair {
    FramePair {
        detections: scene.detections.clone(),
        cloud: scene.cloud.clone(),
        image_ts: 0.0,
        cloud_ts: 0.0,
        skew: 0.0,
    }
}

/// Short lift with a walker crossing the zone; sparse enough to run quickly.
const SHORT_LIFT: &str = r#"
seed = 3
density = 150.0
load = { position = [12.0, 0.0] }
lift = [{ t = 0.0, height = 0.0 }, { t = 2.0, height = 0.32 }]

[[humans]]
path = [
    { t = 0.0, x = 10.0, y = 6.0 },
    { t = 0.4, x = 10.0, y = 6.0 },
    { t = 0.5, x = 10.0, y = 1.5 },
    { t = 1.0, x = 10.0, y = 1.5 },
    { t = 1.1, x = 10.0, y = 6.0 },
]
"#;

#[test]
fn open_scene_localizes_both_objects() {
    let calib = d455();
    let scene = generate_scene(&open_scene(5, &calib), &calib).unwrap();
    let v = process_frame(&frame(&scene), &calib, &PipelineConfig::default()).unwrap();
    assert_eq!(v.status, FrameStatus::Ok);
    let truth = |l: ClassLabel| scene.truth.iter().find(|o| o.label == l).unwrap().center;
    let mic = v.mic.unwrap();
    assert_eq!(mic.label, ClassLabel::Mic);
    // the module is seen by its front face, half its 3 m depth before the center
    let err = mic.position.distance(&truth(ClassLabel::Mic));
    assert!((1.3..2.0).contains(&err), "{err}");
    assert!(mic.position.x < truth(ClassLabel::Mic).x);
    assert_eq!(v.humans.len(), 1);
    assert!(v.humans[0].position.distance(&truth(ClassLabel::Human)) < 0.5);
}

#[test]
fn center_offset_moves_the_module_estimate_back() {
    let calib = d455();
    let scene = generate_scene(&open_scene(5, &calib), &calib).unwrap();
    let truth = scene.truth.iter().find(|o| o.label == ClassLabel::Mic).unwrap().center;
    let plain = process_frame(&frame(&scene), &calib, &PipelineConfig::default()).unwrap();
    let cfg = PipelineConfig::from_toml("[localization]\ncenter_offset = { mic = 1.5 }").unwrap();
    let shifted = process_frame(&frame(&scene), &calib, &cfg).unwrap();
    let (a, b) = (plain.mic.unwrap().position, shifted.mic.unwrap().position);
    assert!(b.distance(&truth) < a.distance(&truth));
    // 1.5 m of camera depth along the same viewing ray
    let o = calib.camera_origin_world();
    let (da, db) = ([a.x - o.x, a.y - o.y, a.z - o.z], [b.x - o.x, b.y - o.y, b.z - o.z]);
    let cross = [
        da[1] * db[2] - da[2] * db[1],
        da[2] * db[0] - da[0] * db[2],
        da[0] * db[1] - da[1] * db[0],
    ];
    assert!(cross.iter().map(|c| c * c).sum::<f64>().sqrt() < 1e-6 * a.distance(&o) * b.distance(&o));
    assert!(b.distance(&a) >= 1.5);
    let za = calib.world_to_camera_point(&a).z;
    let zb = calib.world_to_camera_point(&b).z;
    assert!((zb - za - 1.5).abs() < 1e-9);
    assert_eq!(plain.humans, shifted.humans);
}

struct Occluded {
    flagged: bool,
    truth: f64,
    clustered: f64,
    averaged: f64,
    centers: Vec<f64>,
}

fn occluded_estimate(seed: u64, calib: &CalibrationBundle, cfg: &PipelineConfig) -> Occluded {
    let (spec, target) = occluded_scene(seed, calib);
    let scene = generate_scene(&spec, calib).unwrap();
    let cloud = scene.cloud.denoise(16, 2.0).unwrap().voxel_downsample(0.05).unwrap();
    let img = render_depth_image(&cloud, calib);
    let det = scene.detections[target];
    let flagged = occlusion_check(&det, &scene.detections, &img, &cfg.clustering);
    let truth = surface_depth_at_center(&spec.objects[target], &det.bbox, calib).unwrap();
    let samples = remove_depth_outliers(&extract_bbox_depths(&img, &det.bbox));
    Occluded {
        flagged,
        truth,
        clustered: estimate_target_depth(&samples, flagged, &cfg.clustering).unwrap(),
        averaged: averaging_depth(&samples).unwrap(),
        centers: kmeans_1d(&samples, 3, &cfg.clustering.kmeans).unwrap().centers,
    }
}

#[test]
fn occluded_human_depth_beats_averaging() {
    let calib = d455();
    let cfg = PipelineConfig::default();
    let (mut k, mut a, mut flagged) = (0.0, 0.0, 0);
    for seed in (0..12).step_by(2) {
        let o = occluded_estimate(seed, &calib, &cfg);
        flagged += usize::from(o.flagged);
        k += (o.clustered - o.truth).powi(2);
        a += (o.averaged - o.truth).powi(2);
    }
    assert!(flagged >= 4, "{flagged}/6 flagged");
    assert!(k < a, "kmeans {k:.3} vs averaging {a:.3}");
}

#[test]
fn deep_occluder_takes_two_of_three_clusters() {
    // A module hiding another module spans ~3 m of depth by itself, so the
    // midground cluster lands on the occluder; the target is the far cluster.
    let calib = d455();
    let cfg = PipelineConfig::default();
    let o = occluded_estimate(1, &calib, &cfg);
    assert!(o.flagged);
    assert!((o.centers[2] - o.truth).abs() < 0.3, "{:?} vs {}", o.centers, o.truth);
    assert!(o.clustered < o.truth - 2.0);
}

#[test]
fn scene_generation_is_a_pure_function_of_the_seed() {
    let calib = d455();
    let spec = open_scene(9, &calib);
    assert_eq!(generate_scene(&spec, &calib).unwrap(), generate_scene(&spec, &calib).unwrap());
    let mut other = spec.clone();
    other.seed += 1;
    assert_ne!(
        generate_scene(&spec, &calib).unwrap().cloud,
        generate_scene(&other, &calib).unwrap().cloud
    );
}

#[test]
fn replay_of_a_written_lift_is_deterministic_and_self_consistent() {
    let calib = d455();
    let spec = LiftSpec::from_toml(SHORT_LIFT).unwrap();
    let lift = generate_lift(&spec, &calib).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_replay(dir.path(), &lift, &calib).unwrap();

    let manifest = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let calib_back = io::load_calibration(&dir.path().join("calib.toml")).unwrap();
    let cfg = PipelineConfig::default();
    let first = run_replay(&manifest, &calib_back, &cfg).unwrap();
    let second = run_replay(&manifest, &calib_back, &cfg).unwrap();
    assert_eq!(first.events_ndjson(), second.events_ndjson());

    // 21 camera frames; the last LiDAR stamp would fall past the end of the lift
    assert_eq!(first.summary.frames_processed, 20);
    assert_eq!(first.summary.pairs_dropped, 1);
    let (frames, intruder_frames, no_target, alarms) = RunSummary::recount(&first.events);
    assert_eq!(frames, first.summary.frames_processed);
    assert_eq!(intruder_frames, first.summary.intruder_frames);
    assert_eq!(no_target, first.summary.no_target_frames);
    assert_eq!(alarms, first.summary.alarms_raised);

    // walker inside the zone for t = 0.5 .. 1.0
    assert_eq!(first.summary.intruder_frames, 6);
    assert_eq!(first.summary.alarms_raised, 1);
    let commands: Vec<(f64, AlarmCommand)> = first
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Command { ts, command } => Some((*ts, *command)),
            _ => None,
        })
        .collect();
    assert!(commands.contains(&(0.7, AlarmCommand::AudibleOn)));

    let path = dir.path().join("events.ndjson");
    std::fs::write(&path, first.events_ndjson()).unwrap();
    assert_eq!(read_events(&path).unwrap(), first.events);

    let truth = liftguard::synth::TruthTrack::load(&dir.path().join("truth.json")).unwrap();
    let pairs = pairs_from_run(&first.events, &truth);
    let report = evaluate_localization(&pairs).unwrap();
    assert_eq!(report.class(ClassLabel::Mic).unwrap().count, 20);
    assert!(report.class(ClassLabel::Human).unwrap().max_error < 0.5);
}

#[test]
fn csv_clouds_replay_like_ply_clouds() {
    let calib = d455();
    let mut spec = LiftSpec::from_toml(SHORT_LIFT).unwrap();
    spec.lift = vec![liftguard::synth::HeightKey { t: 0.0, height: 0.0 }, liftguard::synth::HeightKey { t: 0.3, height: 0.0 }];
    let ply = generate_lift(&spec, &calib).unwrap();
    let mut csv = ply.clone();
    csv.cloud_format = liftguard::synth::CloudFormat::Csv;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_replay(a.path(), &ply, &calib).unwrap();
    write_replay(b.path(), &csv, &calib).unwrap();
    let cfg = PipelineConfig::default();
    let ra = run_replay(&Manifest::load(&a.path().join("manifest.json")).unwrap(), &calib, &cfg).unwrap();
    let rb = run_replay(&Manifest::load(&b.path().join("manifest.json")).unwrap(), &calib, &cfg).unwrap();
    assert_eq!(ra.summary, rb.summary);
    for (x, y) in ra.verdicts.iter().zip(&rb.verdicts) {
        let (p, q) = (x.mic.unwrap().position, y.mic.unwrap().position);
        assert!(p.distance(&q) < 1e-6);
    }
}
