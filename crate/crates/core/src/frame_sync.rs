//! Timestamp pairing of image frames (with their detections) and point clouds.
//!
//! Image frames drive the pairing: each image, in order, takes the nearest
//! still-unused cloud within the tolerance; ties go to the earlier cloud.
//! Images without a candidate are dropped and counted.

use std::collections::VecDeque;

use thiserror::Error;

use crate::detection::Detection;
use crate::pointcloud::PointCloud;

/// Just over half the 10 Hz LiDAR period.
pub const DEFAULT_SYNC_TOLERANCE: f64 = 0.06;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("{stream} timestamps regress at index {index} ({previous} -> {current})")]
    UnorderedStream {
        stream: &'static str,
        index: usize,
        previous: f64,
        current: f64,
    },
    #[error("sync tolerance must be > 0, got {0}")]
    InvalidTolerance(f64),
    #[error("negative or non-finite timestamp {0}")]
    InvalidTimestamp(f64),
}

/// Index-level outcome of pairing two timestamp streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamMatch {
    pub image_index: usize,
    pub cloud_index: usize,
    pub skew: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub matches: Vec<StreamMatch>,
    pub dropped: usize,
}

fn check_stream(stream: &'static str, ts: &[f64]) -> Result<(), SyncError> {
    for (i, t) in ts.iter().enumerate() {
        if !(t.is_finite() && *t >= 0.0) {
            return Err(SyncError::InvalidTimestamp(*t));
        }
        if i > 0 && *t < ts[i - 1] {
            return Err(SyncError::UnorderedStream {
                stream,
                index: i,
                previous: ts[i - 1],
                current: *t,
            });
        }
    }
    Ok(())
}

/// Greedy in-order pairing over raw timestamps.
pub fn pair_timestamps(image_ts: &[f64], cloud_ts: &[f64], tolerance: f64) -> Result<Pairing, SyncError> {
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(SyncError::InvalidTolerance(tolerance));
    }
    check_stream("image", image_ts)?;
    check_stream("cloud", cloud_ts)?;

    let mut used = vec![false; cloud_ts.len()];
    let mut window_start = 0;
    let mut out = Pairing::default();
    for (image_index, &t) in image_ts.iter().enumerate() {
        while window_start < cloud_ts.len() && t - cloud_ts[window_start] > tolerance {
            window_start += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, &c) in cloud_ts.iter().enumerate().skip(window_start) {
            if c - t > tolerance {
                break;
            }
            let skew = (c - t).abs();
            if used[j] || skew > tolerance {
                continue;
            }
            if best.is_none_or(|(_, s)| skew < s) {
                best = Some((j, skew));
            }
        }
        match best {
            Some((cloud_index, skew)) => {
                used[cloud_index] = true;
                out.matches.push(StreamMatch {
                    image_index,
                    cloud_index,
                    skew,
                });
            }
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

/// One image frame: its timestamp and the detections produced for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub timestamp: f64,
    pub detections: Vec<Detection>,
}

/// A timestamp-matched (detections, cloud) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub detections: Vec<Detection>,
    pub cloud: PointCloud,
    pub image_ts: f64,
    pub cloud_ts: f64,
    pub skew: f64,
}

/// Batch pairing of buffered streams. Returns the pairs in image order and the
/// number of dropped image frames.
pub fn pair_streams(
    images: Vec<ImageFrame>,
    clouds: Vec<PointCloud>,
    tolerance: f64,
) -> Result<(Vec<FramePair>, usize), SyncError> {
    let image_ts: Vec<f64> = images.iter().map(|f| f.timestamp).collect();
    let cloud_ts: Vec<f64> = clouds.iter().map(|c| c.timestamp()).collect();
    let pairing = pair_timestamps(&image_ts, &cloud_ts, tolerance)?;

    let mut images: Vec<Option<ImageFrame>> = images.into_iter().map(Some).collect();
    let mut clouds: Vec<Option<PointCloud>> = clouds.into_iter().map(Some).collect();
    let pairs = pairing
        .matches
        .iter()
        .map(|m| {
            let image = images[m.image_index].take().expect("each image matched once");
            let cloud = clouds[m.cloud_index].take().expect("each cloud matched once");
            FramePair {
                detections: image.detections,
                image_ts: image.timestamp,
                cloud_ts: cloud.timestamp(),
                cloud,
                skew: m.skew,
            }
        })
        .collect();
    Ok((pairs, pairing.dropped))
}

/// Output of [`StreamingPairer`].
#[derive(Debug, Clone, PartialEq)]
pub enum SyncEvent<I, C> {
    Paired { image: I, cloud: C, image_ts: f64, cloud_ts: f64, skew: f64 },
    Dropped { image: I, image_ts: f64 },
}

/// Incremental form of [`pair_timestamps`] for in-order live delivery.
///
/// An image is resolved once a cloud newer than `image_ts + tolerance` has been
/// seen (or at [`finish`](Self::finish)), so its output equals the batch form.
/// Clouds older than the oldest pending image's window are discarded.
#[derive(Debug)]
pub struct StreamingPairer<I, C> {
    tolerance: f64,
    images: VecDeque<(f64, I)>,
    clouds: VecDeque<(f64, Option<C>)>,
    last_image_ts: f64,
    last_cloud_ts: f64,
    latest_cloud_ts: Option<f64>,
    image_count: usize,
    cloud_count: usize,
}

impl<I, C> StreamingPairer<I, C> {
    pub fn new(tolerance: f64) -> Result<Self, SyncError> {
        if !(tolerance > 0.0 && tolerance.is_finite()) {
            return Err(SyncError::InvalidTolerance(tolerance));
        }
        Ok(Self {
            tolerance,
            images: VecDeque::new(),
            clouds: VecDeque::new(),
            last_image_ts: 0.0,
            last_cloud_ts: 0.0,
            latest_cloud_ts: None,
            image_count: 0,
            cloud_count: 0,
        })
    }

    fn check(stream: &'static str, index: usize, previous: f64, current: f64) -> Result<(), SyncError> {
        if !(current.is_finite() && current >= 0.0) {
            return Err(SyncError::InvalidTimestamp(current));
        }
        if index > 0 && current < previous {
            return Err(SyncError::UnorderedStream {
                stream,
                index,
                previous,
                current,
            });
        }
        Ok(())
    }

    pub fn push_image(&mut self, ts: f64, image: I) -> Result<Vec<SyncEvent<I, C>>, SyncError> {
        Self::check("image", self.image_count, self.last_image_ts, ts)?;
        self.image_count += 1;
        self.last_image_ts = ts;
        self.images.push_back((ts, image));
        Ok(self.drain(false))
    }

    pub fn push_cloud(&mut self, ts: f64, cloud: C) -> Result<Vec<SyncEvent<I, C>>, SyncError> {
        Self::check("cloud", self.cloud_count, self.last_cloud_ts, ts)?;
        self.cloud_count += 1;
        self.last_cloud_ts = ts;
        self.latest_cloud_ts = Some(ts);
        self.clouds.push_back((ts, Some(cloud)));
        Ok(self.drain(false))
    }

    /// Resolves every pending image; no more input may follow.
    pub fn finish(mut self) -> Vec<SyncEvent<I, C>> {
        self.drain(true)
    }

    fn drain(&mut self, finished: bool) -> Vec<SyncEvent<I, C>> {
        let mut events = Vec::new();
        while let Some(&(t, _)) = self.images.front() {
            let window_closed = self.latest_cloud_ts.is_some_and(|c| c - t > self.tolerance);
            if !(finished || window_closed) {
                break;
            }
            while self
                .clouds
                .front()
                .is_some_and(|(c, _)| t - *c > self.tolerance)
            {
                self.clouds.pop_front();
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, (c, slot)) in self.clouds.iter().enumerate() {
                if c - t > self.tolerance {
                    break;
                }
                let skew = (c - t).abs();
                if slot.is_none() || skew > self.tolerance {
                    continue;
                }
                if best.is_none_or(|(_, s)| skew < s) {
                    best = Some((j, skew));
                }
            }
            let (image_ts, image) = self.images.pop_front().expect("front checked");
            events.push(match best {
                Some((j, skew)) => {
                    let cloud_ts = self.clouds[j].0;
                    let cloud = self.clouds[j].1.take().expect("unused slot");
                    SyncEvent::Paired { image, cloud, image_ts, cloud_ts, skew }
                }
                None => SyncEvent::Dropped { image, image_ts },
            });
        }
        events
    }
}
