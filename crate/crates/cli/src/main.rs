use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use liftguard::detection::DetectionEvaluator;
use liftguard::io::{self, LocalizationPair, Manifest};
use liftguard::pointcloud::render_depth_image;
use liftguard::replay::{pairs_from_run, read_events, run_replay, Event, RunSummary};
use liftguard::safety::{evaluate_localization, LocalizationReport};
use liftguard::synth::{generate_lift, write_replay, LiftSpec, TruthTrack};
use liftguard::{CalibrationBundle, PipelineConfig};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

mod table;

const BUILTIN_CALIB: &str = include_str!("../../core/fixtures/calib_d455.toml");
const BUILTIN_SPEC: &str = include_str!("../../core/fixtures/scenarios/compliant.toml");

/// Exit status when the replay entered the alarm state at least once.
const EXIT_ALARM: u8 = 2;

#[derive(Parser)]
#[command(name = "liftguard", version, about = "Crane-lift safety monitoring from camera detections and LiDAR clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Records,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a recorded manifest; writes events.ndjson and summary.json.
    /// Exits 2 if the alarm was raised.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to calib.toml next to the manifest.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth track; adds localization errors to the summary.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Precision, recall and AP per class for a directory of detection files
    /// against a directory of ground-truth files with the same names.
    EvalDetect {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Extra IoU threshold to report AP at (repeatable).
        #[arg(long = "iou-thresh")]
        iou_thresh: Vec<f64>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Distance errors between localized and true positions.
    EvalLocalize {
        /// Event log written by `replay`.
        #[arg(long, requires = "truth", conflicts_with = "pairs")]
        run: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// CSV of paired positions instead of a run.
        #[arg(long, required_unless_present = "run")]
        pairs: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Render a scripted lift into a replay directory.
    Synth {
        /// Lift spec (TOML). Defaults to a compliant lift.
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the built-in D455 calibration.
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Render a cloud into a 16-bit millimetre depth PNG.
    DepthImage {
        cloud: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env("LIFTGUARD_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined with ": ", skipping causes the outer messages
/// already spell out.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Replay {
            manifest,
            calib,
            config,
            out,
            truth,
            format,
        } => cmd_replay(&manifest, calib.as_deref(), config.as_deref(), &out, truth.as_deref(), format),
        Command::EvalDetect {
            detections,
            ground_truth,
            iou_thresh,
            format,
        } => cmd_eval_detect(&detections, &ground_truth, &iou_thresh, format).map(|()| 0),
        Command::EvalLocalize {
            run,
            truth,
            pairs,
            format,
        } => cmd_eval_localize(run.as_deref(), truth.as_deref(), pairs.as_deref(), format).map(|()| 0),
        Command::Synth { spec, out, seed, calib } => {
            cmd_synth(spec.as_deref(), &out, seed, calib.as_deref()).map(|()| 0)
        }
        Command::DepthImage {
            cloud,
            calib,
            out,
            format,
        } => cmd_depth_image(&cloud, &calib, &out, format).map(|()| 0),
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_records<T: Serialize>(value: &T) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

#[derive(Serialize)]
struct ReplaySummary {
    #[serde(flatten)]
    run: RunSummary,
    localization: Option<LocalizationReport>,
    wall_time_s: f64,
}

fn cmd_replay(
    manifest_path: &Path,
    calib: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    truth: Option<&Path>,
    format: Format,
) -> Result<u8> {
    let started = Instant::now();
    let manifest = Manifest::load(manifest_path)?;
    let calib_path = match calib {
        Some(p) => p.to_path_buf(),
        None => manifest.resolve("calib.toml"),
    };
    let calib = io::load_calibration(&calib_path)?;
    let config = match config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    let truth = truth
        .map(TruthTrack::load)
        .transpose()?;

    let output = run_replay(&manifest, &calib, &config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let events_path = out.join("events.ndjson");
    fs::write(&events_path, output.events_ndjson()).with_context(|| format!("writing {}", events_path.display()))?;

    let localization = match &truth {
        Some(t) => {
            let pairs = pairs_from_run(&output.events, t);
            (!pairs.is_empty()).then(|| evaluate_localization(&pairs)).transpose()?
        }
        None => None,
    };
    let summary = ReplaySummary {
        run: output.summary,
        localization,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    io::write_json(&out.join("summary.json"), &summary)?;

    match format {
        Format::Records => print_records(&summary)?,
        Format::Table => {
            let r = &summary.run;
            let mut t = table::Table::new(["quantity", "value"]);
            t.row(["frames processed".to_string(), r.frames_processed.to_string()]);
            t.row(["pairs dropped".to_string(), r.pairs_dropped.to_string()]);
            t.row(["frames without target".to_string(), r.no_target_frames.to_string()]);
            t.row(["intruder frames".to_string(), r.intruder_frames.to_string()]);
            t.row(["alarms raised".to_string(), r.alarms_raised.to_string()]);
            if let Some(c) = &r.compliance {
                t.row(["clearance".to_string(), pass_fail(c.clearance_ok).to_string()]);
                t.row(["lift to hold height".to_string(), pass_fail(c.lift_ok).to_string()]);
                t.row(["hold duration".to_string(), format!("{} ({:.2} s)", pass_fail(c.hold_ok), c.measured_hold)]);
            }
            if let Some(l) = &summary.localization {
                for c in &l.classes {
                    t.row([format!("{} mean error (m)", c.label.as_str()), format!("{:.4}", c.mean_error)]);
                }
            }
            t.row(["wall time (s)".to_string(), format!("{:.2}", summary.wall_time_s)]);
            emit(&t.render())?;
        }
    }
    Ok(if summary.run.alarms_raised > 0 { EXIT_ALARM } else { 0 })
}

fn pass_fail(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn json_files(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut names = BTreeSet::new();
    for e in entries {
        let e = e.with_context(|| format!("reading directory {}", dir.display()))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".json") {
            names.insert(name);
        }
    }
    Ok(names)
}

fn cmd_eval_detect(dets: &Path, gts: &Path, thresholds: &[f64], format: Format) -> Result<()> {
    let det_names = json_files(dets)?;
    let gt_names = json_files(gts)?;
    if let Some(missing) = gt_names.symmetric_difference(&det_names).next() {
        let side = if gt_names.contains(missing) { dets } else { gts };
        bail!("frame sets differ: {} has no {missing}", side.display());
    }
    if gt_names.is_empty() {
        bail!("no .json frames in {}", gts.display());
    }
    let mut evaluator = DetectionEvaluator::new();
    for name in &gt_names {
        evaluator.add_frame(io::read_detections(&dets.join(name))?, io::read_detections(&gts.join(name))?);
    }
    let report = evaluator.report(thresholds)?;
    match format {
        Format::Records => print_records(&report),
        Format::Table => {
            emit(&table::detection(&report))?;
            Ok(())
        }
    }
}

/// Pairs every frame of a run with the truth frame of the same timestamp.
fn run_pairs(run: &Path, truth: &Path) -> Result<Vec<LocalizationPair>> {
    let events = read_events(run)?;
    let track = TruthTrack::load(truth)?;
    for e in &events {
        if let Event::Frame { ts, .. } = e {
            if !track.frames.iter().any(|f| (f.timestamp - ts).abs() < 1e-6) {
                bail!("frame at t={ts} in {} has no ground truth in {}", run.display(), truth.display());
            }
        }
    }
    Ok(pairs_from_run(&events, &track))
}

#[derive(Serialize)]
struct PairRecord<'a> {
    frame: &'a str,
    class: liftguard::ClassLabel,
    truth: [f64; 3],
    detected: [f64; 3],
    error: f64,
}

fn cmd_eval_localize(run: Option<&Path>, truth: Option<&Path>, pairs: Option<&Path>, format: Format) -> Result<()> {
    let pairs = match (run, truth, pairs) {
        (Some(run), Some(truth), None) => run_pairs(run, truth)?,
        (None, _, Some(p)) => io::read_localization_pairs(p)?,
        _ => bail!("give either --run with --truth, or --pairs"),
    };
    if pairs.is_empty() {
        bail!("no aligned positions to evaluate");
    }
    let report = evaluate_localization(&pairs)?;
    match format {
        Format::Table => {
            emit(&table::localization(&pairs, &report))?;
            Ok(())
        }
        Format::Records => {
            let rows: Vec<PairRecord> = pairs
                .iter()
                .map(|p| PairRecord {
                    frame: &p.frame,
                    class: p.class,
                    truth: [p.truth.x, p.truth.y, p.truth.z],
                    detected: [p.detected.x, p.detected.y, p.detected.z],
                    error: liftguard::safety::distance_error(&p.detected, &p.truth),
                })
                .collect();
            print_records(&serde_json::json!({ "pairs": rows, "classes": report.classes }))
        }
    }
}

fn load_calib_or_builtin(calib: Option<&Path>) -> Result<CalibrationBundle> {
    Ok(match calib {
        Some(p) => io::load_calibration(p)?,
        None => io::parse_calibration(BUILTIN_CALIB, Path::new("<built-in D455>"))?,
    })
}

fn cmd_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>, calib: Option<&Path>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => LiftSpec::load(p).with_context(|| format!("loading lift spec {}", p.display()))?,
        None => LiftSpec::from_toml(BUILTIN_SPEC)?,
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let calib = load_calib_or_builtin(calib)?;
    let replay = generate_lift(&spec, &calib)?;
    write_replay(out, &replay, &calib)?;
    tracing::info!(dir = %out.display(), frames = replay.images.len(), "wrote replay");
    emit(&format!(
        "wrote {} camera frames and {} clouds to {}\n",
        replay.images.len(),
        replay.clouds.len(),
        out.display()
    ))
}

#[derive(Serialize)]
struct DepthSummary {
    width: u32,
    height: u32,
    populated: usize,
}

fn cmd_depth_image(cloud: &Path, calib: &Path, out: &Path, format: Format) -> Result<()> {
    let calib = io::load_calibration(calib)?;
    let cloud = io::read_cloud(cloud, 0.0)?;
    let img = render_depth_image(&cloud, &calib);
    io::write_depth_png(out, &img)?;
    let summary = DepthSummary {
        width: img.width(),
        height: img.height(),
        populated: img.populated_count(),
    };
    match format {
        Format::Records => print_records(&summary),
        Format::Table => {
            emit(&format!("{}x{} depth image, {} populated pixels\n", summary.width, summary.height, summary.populated))
        }
    }
}
