//! Replay runner: manifest -> frame pairing -> per-frame verdicts (parallel) ->
//! lift track and alarm state machine (serial, in frame order) -> event log.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::detection::{ClassLabel, Detector, DetectorError, RecordedDetector};
use crate::frame_sync::{pair_timestamps, FramePair, SyncError};
use crate::geometry::{CalibrationBundle, WorldPoint};
use crate::io::{self, IoError, LocalizationPair, Manifest};
use crate::safety::{
    check_333, process_frame, AlarmCommand, AlarmMachine, AlarmMode, ComplianceReport, FrameStatus,
    LiftTrack, RuleStatus, SafetyError, SafetyVerdict,
};
use crate::synth::TruthTrack;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("frame at t={timestamp}: {source}")]
    Frame {
        timestamp: f64,
        #[source]
        source: SafetyError,
    },
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Frame {
        ts: f64,
        cloud_ts: f64,
        status: FrameStatus,
        target: Option<ClassLabel>,
        mic_position: Option<WorldPoint>,
        humans: Vec<WorldPoint>,
        intruders: Vec<usize>,
        clearance: RuleStatus,
        lift: RuleStatus,
        alarm_mode: AlarmMode,
    },
    Command {
        ts: f64,
        command: AlarmCommand,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames_processed: usize,
    pub pairs_dropped: usize,
    pub intruder_frames: usize,
    pub no_target_frames: usize,
    pub alarms_raised: usize,
    pub compliance: Option<ComplianceReport>,
}

impl RunSummary {
    /// Recounts a summary from an event log alone.
    pub fn recount(events: &[Event]) -> (usize, usize, usize, usize) {
        let mut frames = 0;
        let mut intruder_frames = 0;
        let mut no_target = 0;
        let mut alarms = 0;
        let mut previous = AlarmMode::Idle;
        for e in events {
            if let Event::Frame {
                status,
                intruders,
                alarm_mode,
                ..
            } = e
            {
                frames += 1;
                intruder_frames += usize::from(!intruders.is_empty());
                no_target += usize::from(*status == FrameStatus::NoTarget);
                alarms += usize::from(*alarm_mode == AlarmMode::Alarm && previous != AlarmMode::Alarm);
                previous = *alarm_mode;
            }
        }
        (frames, intruder_frames, no_target, alarms)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub verdicts: Vec<SafetyVerdict>,
    pub events: Vec<Event>,
    pub summary: RunSummary,
}

impl ReplayOutput {
    /// Newline-delimited JSON, one event per line.
    pub fn write_events<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn events_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_events(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IoError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn run_replay(
    manifest: &Manifest,
    calib: &CalibrationBundle,
    config: &PipelineConfig,
) -> Result<ReplayOutput, ReplayError> {
    let images = manifest.image_entries();
    let clouds = manifest.cloud_entries();
    let image_ts: Vec<f64> = images.iter().map(|(t, _)| *t).collect();
    let cloud_ts: Vec<f64> = clouds.iter().map(|(t, _)| *t).collect();
    let pairing = pair_timestamps(&image_ts, &cloud_ts, config.sync.tolerance)?;
    tracing::info!(
        images = images.len(),
        clouds = clouds.len(),
        paired = pairing.matches.len(),
        dropped = pairing.dropped,
        "paired streams"
    );

    let detector = RecordedDetector::from_manifest(manifest);
    let verdicts = pairing
        .matches
        .par_iter()
        .map(|m| {
            let (ts, det_path) = &images[m.image_index];
            let (cts, cloud_path) = &clouds[m.cloud_index];
            let detections = detector.detect(&det_path.to_string_lossy(), *ts)?;
            let cloud = io::read_cloud(cloud_path, *cts)?;
            let pair = FramePair {
                detections,
                cloud,
                image_ts: *ts,
                cloud_ts: *cts,
                skew: m.skew,
            };
            process_frame(&pair, calib, config).map_err(|source| ReplayError::Frame {
                timestamp: *ts,
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut verdicts = verdicts;
    let mut track = LiftTrack::new(config.compliance);
    let mut alarm = AlarmMachine::new(config.alarm);
    let mut events = Vec::with_capacity(verdicts.len() * 2);
    for (v, m) in verdicts.iter_mut().zip(&pairing.matches) {
        if let Some(mic) = &v.mic {
            v.compliance.lift = track
                .push(v.timestamp, mic.position)
                .map_err(|source| ReplayError::Frame {
                    timestamp: v.timestamp,
                    source,
                })?;
        }
        let commands = alarm.step(v);
        events.push(Event::Frame {
            ts: v.timestamp,
            cloud_ts: cloud_ts[m.cloud_index],
            status: v.status,
            target: v.mic.map(|o| o.label),
            mic_position: v.mic.map(|o| o.position),
            humans: v.humans.iter().map(|h| h.position).collect(),
            intruders: v.intruders.clone(),
            clearance: v.compliance.clearance,
            lift: v.compliance.lift,
            alarm_mode: alarm.state().mode,
        });
        events.extend(commands.into_iter().map(|command| Event::Command {
            ts: v.timestamp,
            command,
        }));
    }

    let compliance = if track.is_empty() {
        None
    } else {
        Some(check_333(&track, &verdicts, &config.compliance).map_err(|source| ReplayError::Frame {
            timestamp: 0.0,
            source,
        })?)
    };
    let summary = RunSummary {
        frames_processed: verdicts.len(),
        pairs_dropped: pairing.dropped,
        intruder_frames: verdicts.iter().filter(|v| v.has_intruders()).count(),
        no_target_frames: verdicts.iter().filter(|v| v.status == FrameStatus::NoTarget).count(),
        alarms_raised: alarm.alarms_raised(),
        compliance,
    };
    Ok(ReplayOutput {
        verdicts,
        events,
        summary,
    })
}

/// Loads `manifest`, `calib` and an optional config file and runs the replay.
pub fn run_replay_files(
    manifest: &Path,
    calib: &Path,
    config: Option<&Path>,
) -> Result<ReplayOutput, Box<dyn std::error::Error + Send + Sync>> {
    let manifest = Manifest::load(manifest)?;
    let calib = io::load_calibration(calib)?;
    let config = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(run_replay(&manifest, &calib, &config)?)
}

const TS_MATCH: f64 = 1e-6;

/// Aligns a run's localized objects with the ground truth of the same frames.
/// The module is compared with the truth module; humans are matched greedily
/// by increasing distance, each truth human used at most once.
pub fn pairs_from_run(events: &[Event], truth: &TruthTrack) -> Vec<LocalizationPair> {
    let mut pairs = Vec::new();
    for e in events {
        let Event::Frame {
            ts,
            mic_position,
            humans,
            ..
        } = e
        else {
            continue;
        };
        let Some(frame) = truth.frames.iter().find(|f| (f.timestamp - ts).abs() < TS_MATCH) else {
            continue;
        };
        let label = format!("{ts:.3}");
        if let (Some(det), Some(t)) = (mic_position, frame.objects.iter().find(|o| o.label == ClassLabel::Mic)) {
            pairs.push(LocalizationPair {
                frame: label.clone(),
                class: ClassLabel::Mic,
                truth: t.center,
                detected: *det,
            });
        }
        let truth_humans: Vec<WorldPoint> = frame
            .objects
            .iter()
            .filter(|o| o.label == ClassLabel::Human)
            .map(|o| o.center)
            .collect();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, d) in humans.iter().enumerate() {
            for (j, t) in truth_humans.iter().enumerate() {
                candidates.push((d.distance(t), i, j));
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used_d = vec![false; humans.len()];
        let mut used_t = vec![false; truth_humans.len()];
        let mut matched = Vec::new();
        for (_, i, j) in candidates {
            if used_d[i] || used_t[j] {
                continue;
            }
            used_d[i] = true;
            used_t[j] = true;
            matched.push((i, j));
        }
        matched.sort();
        for (i, j) in matched {
            pairs.push(LocalizationPair {
                frame: label.clone(),
                class: ClassLabel::Human,
                truth: truth_humans[j],
                detected: humans[i],
            });
        }
    }
    pairs
}
