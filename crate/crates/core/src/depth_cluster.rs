//! Per-box depth estimation: sample harvesting, outlier fencing, occlusion test,
//! 1-D clustering and target-depth selection.
//!
//! The target depth of an unoccluded object is the median of the foreground
//! (nearest) cluster of a 2-way split. When another detection blocks the object,
//! the samples are split three ways and the midground median is used instead,
//! the occluder being the foreground.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{BBox, Detection};
use crate::pointcloud::DepthImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no depth samples")]
    EmptySamples,
    #[error("depth samples must be finite and > 0, got {0}")]
    InvalidSample(f64),
    #[error("length mismatch: {estimates} estimates vs {truth} ground-truth values")]
    LengthMismatch { estimates: usize, truth: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Camera-frame depths (meters) harvested from one bounding box.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DepthSamples(Vec<f64>);

impl DepthSamples {
    pub fn new(values: Vec<f64>) -> Result<Self, ClusterError> {
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(ClusterError::InvalidSample(*bad));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> Option<f64> {
        self.0.iter().copied().reduce(f64::min)
    }

    pub fn max(&self) -> Option<f64> {
        self.0.iter().copied().reduce(f64::max)
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linearly interpolated quantile of ascending data (`p` in `[0, 1]`).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(quantile_sorted(&sorted(values), 0.5))
}

/// Populated depths whose pixel center lies inside `bbox`, in row-major order.
pub fn extract_bbox_depths(img: &DepthImage, bbox: &BBox) -> DepthSamples {
    let Some(b) = bbox.clamp_to(img.width(), img.height()) else {
        return DepthSamples::default();
    };
    let row_end = (b.v_max.ceil() as u32).min(img.height());
    let col_end = (b.u_max.ceil() as u32).min(img.width());
    let mut out = Vec::new();
    for row in b.v_min.floor() as u32..row_end {
        for col in b.u_min.floor() as u32..col_end {
            if !b.contains(col as f64 + 0.5, row as f64 + 0.5) {
                continue;
            }
            if let Some(d) = img.get(col, row) {
                out.push(d);
            }
        }
    }
    DepthSamples(out)
}

/// Tukey fence: drops values outside `[Q1 - 1.5·IQR, Q3 + 1.5·IQR]`, keeping order.
pub fn remove_depth_outliers(s: &DepthSamples) -> DepthSamples {
    if s.is_empty() {
        return DepthSamples::default();
    }
    let ordered = sorted(&s.0);
    let q1 = quantile_sorted(&ordered, 0.25);
    let q3 = quantile_sorted(&ordered, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    DepthSamples(s.0.iter().copied().filter(|v| *v >= lo && *v <= hi).collect())
}

/// Arithmetic mean of the samples.
pub fn averaging_depth(s: &DepthSamples) -> Result<f64, ClusterError> {
    if s.is_empty() {
        return Err(ClusterError::EmptySamples);
    }
    Ok(s.0.iter().sum::<f64>() / s.len() as f64)
}

/// 1-D clustering outcome. Centers are ascending and `assignments` follows the
/// input sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl ClusterResult {
    /// Builds a result from unsorted centers by nearest-center assignment.
    fn from_centers(values: &[f64], mut centers: Vec<f64>) -> Self {
        centers.sort_by(f64::total_cmp);
        let assignments: Vec<usize> = values.iter().map(|v| nearest(&centers, *v)).collect();
        let inertia = inertia(values, &centers, &assignments);
        Self {
            centers,
            assignments,
            inertia,
        }
    }

    pub fn members(&self, values: &[f64], cluster: usize) -> Vec<f64> {
        values
            .iter()
            .zip(&self.assignments)
            .filter(|(_, a)| **a == cluster)
            .map(|(v, _)| *v)
            .collect()
    }

    /// Indices of clusters that own at least one sample, nearest first.
    pub fn occupied(&self) -> Vec<usize> {
        (0..self.centers.len())
            .filter(|c| self.assignments.contains(c))
            .collect()
    }
}

fn nearest(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, c) in centers.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centers[best]).abs() {
            best = i;
        }
    }
    best
}

fn inertia(values: &[f64], centers: &[f64], assignments: &[usize]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(v, a)| (v - centers[*a]).powi(2))
        .sum()
}

/// How K-Means picks its starting centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansInit {
    /// Means of the optimal contiguous partition of the sorted samples.
    #[default]
    Optimal,
    /// Evenly spread quantiles (25/75 for k=2, 17/50/83 for k=3).
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub tol: f64,
    pub init: KMeansInit,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
            init: KMeansInit::Optimal,
        }
    }
}

fn quantile_seeds(sorted: &[f64], k: usize) -> Vec<f64> {
    let probs: Vec<f64> = match k {
        1 => vec![0.5],
        2 => vec![0.25, 0.75],
        3 => vec![0.17, 0.50, 0.83],
        _ => (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect(),
    };
    probs.iter().map(|p| quantile_sorted(sorted, *p)).collect()
}

/// Segment means of the minimum-inertia partition of ascending data into `k`
/// contiguous runs (optimal 1-D clusters are contiguous). Dynamic programming
/// with divide-and-conquer over the monotone split points.
fn optimal_seeds(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    let shift = sorted[n / 2];
    let mut sum = vec![0.0; n + 1];
    let mut sq = vec![0.0; n + 1];
    for (i, v) in sorted.iter().enumerate() {
        let d = v - shift;
        sum[i + 1] = sum[i] + d;
        sq[i + 1] = sq[i] + d * d;
    }
    // within-cluster sum of squares of sorted[i..j]
    let cost = |i: usize, j: usize| -> f64 {
        let m = (j - i) as f64;
        let s = sum[j] - sum[i];
        (sq[j] - sq[i] - s * s / m).max(0.0)
    };

    let mut prev: Vec<f64> = (0..=n).map(|j| if j == 0 { 0.0 } else { cost(0, j) }).collect();
    let mut splits: Vec<Vec<usize>> = Vec::with_capacity(k);
    splits.push(vec![0; n + 1]);

    #[allow(clippy::too_many_arguments)]
    fn solve(
        layer: usize,
        lo: usize,
        hi: usize,
        opt_lo: usize,
        opt_hi: usize,
        prev: &[f64],
        cur: &mut [f64],
        split: &mut [usize],
        cost: &dyn Fn(usize, usize) -> f64,
    ) {
        if lo > hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let mut best = (f64::INFINITY, opt_lo);
        // the last run is sorted[i..mid], and the first `layer` runs need i >= layer
        let start = opt_lo.max(layer);
        let end = opt_hi.min(mid - 1);
        for (i, p) in prev.iter().enumerate().take(end + 1).skip(start) {
            let c = p + cost(i, mid);
            if c < best.0 {
                best = (c, i);
            }
        }
        cur[mid] = best.0;
        split[mid] = best.1;
        if mid > lo {
            solve(layer, lo, mid - 1, opt_lo, best.1, prev, cur, split, cost);
        }
        solve(layer, mid + 1, hi, best.1, opt_hi, prev, cur, split, cost);
    }

    for layer in 1..k {
        let mut cur = vec![f64::INFINITY; n + 1];
        let mut split = vec![0; n + 1];
        solve(layer, layer + 1, n, layer, n - 1, &prev, &mut cur, &mut split, &cost);
        prev = cur;
        splits.push(split);
    }

    let mut bounds = vec![n];
    let mut j = n;
    for layer in (1..k).rev() {
        j = splits[layer][j];
        bounds.push(j);
    }
    bounds.push(0);
    bounds.reverse();
    bounds
        .windows(2)
        .map(|w| sorted[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
        .collect()
}

/// Lloyd K-Means on scalar depths. Returns the result and the inertia after
/// every assignment step.
pub fn kmeans_1d_traced(
    s: &DepthSamples,
    k: usize,
    params: &KMeansParams,
) -> Result<(ClusterResult, Vec<f64>), ClusterError> {
    if k == 0 {
        return Err(ClusterError::InvalidParameter("k must be >= 1".into()));
    }
    if s.len() < k {
        return Err(ClusterError::TooFewSamples {
            needed: k,
            got: s.len(),
        });
    }
    let values = s.values();
    let ordered = sorted(values);
    let mut centers = match params.init {
        KMeansInit::Optimal => optimal_seeds(&ordered, k),
        KMeansInit::Quantile => quantile_seeds(&ordered, k),
    };
    let mut trace = Vec::new();
    let mut assignments: Vec<usize>;
    for _ in 0..params.max_iter.max(1) {
        assignments = values.iter().map(|v| nearest(&centers, *v)).collect();
        trace.push(inertia(values, &centers, &assignments));
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (v, a) in values.iter().zip(&assignments) {
            sums[*a] += v;
            counts[*a] += 1;
        }
        let mut movement = 0.0_f64;
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                let updated = sums[c] / counts[c] as f64;
                movement = movement.max((updated - centers[c]).abs());
                centers[c] = updated;
            }
        }
        if movement < params.tol {
            break;
        }
    }
    let result = ClusterResult::from_centers(values, centers);
    trace.push(result.inertia);
    Ok((result, trace))
}

pub fn kmeans_1d(s: &DepthSamples, k: usize, params: &KMeansParams) -> Result<ClusterResult, ClusterError> {
    kmeans_1d_traced(s, k, params).map(|(r, _)| r)
}

/// Flat-kernel mean shift. Every sample climbs to its mode; modes closer than
/// `bandwidth / 2` are merged into one center.
pub fn mean_shift_1d(s: &DepthSamples, bandwidth: f64) -> Result<ClusterResult, ClusterError> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(ClusterError::InvalidParameter(format!(
            "bandwidth must be > 0, got {bandwidth}"
        )));
    }
    if s.is_empty() {
        return Err(ClusterError::EmptySamples);
    }
    let ordered = sorted(s.values());
    let mut prefix = vec![0.0; ordered.len() + 1];
    for (i, v) in ordered.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let window_mean = |x: f64| -> f64 {
        let lo = ordered.partition_point(|v| *v < x - bandwidth);
        let hi = ordered.partition_point(|v| *v <= x + bandwidth);
        if hi == lo {
            return x;
        }
        (prefix[hi] - prefix[lo]) / (hi - lo) as f64
    };

    let mut modes: Vec<f64> = Vec::new();
    let mut last_start: Option<(f64, f64)> = None;
    for &start in &ordered {
        if let Some((prev_start, prev_mode)) = last_start {
            if prev_start == start {
                modes.push(prev_mode);
                continue;
            }
        }
        let mut x = start;
        for _ in 0..500 {
            let next = window_mean(x);
            let done = (next - x).abs() <= 1e-10 * bandwidth;
            x = next;
            if done {
                break;
            }
        }
        modes.push(x);
        last_start = Some((start, x));
    }

    modes.sort_by(f64::total_cmp);
    let mut centers = Vec::new();
    let mut group: Vec<f64> = vec![modes[0]];
    for &m in &modes[1..] {
        if m - group[group.len() - 1] < bandwidth / 2.0 {
            group.push(m);
        } else {
            centers.push(group.iter().sum::<f64>() / group.len() as f64);
            group = vec![m];
        }
    }
    centers.push(group.iter().sum::<f64>() / group.len() as f64);
    Ok(ClusterResult::from_centers(s.values(), centers))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    #[default]
    Kmeans,
    Averaging,
    MeanShift,
}

impl ClusterMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Kmeans => "kmeans",
            Self::Averaging => "averaging",
            Self::MeanShift => "mean_shift",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub method: ClusterMethod,
    pub kmeans: KMeansParams,
    pub mean_shift_bandwidth: f64,
    /// Minimum share of the target box covered by another detection.
    pub occlusion_overlap_ratio: f64,
    /// Minimum amount (m) by which the covered region must be nearer than the target.
    pub occlusion_depth_gap: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            method: ClusterMethod::Kmeans,
            kmeans: KMeansParams::default(),
            mean_shift_bandwidth: 0.5,
            occlusion_overlap_ratio: 0.2,
            occlusion_depth_gap: 1.0,
        }
    }
}

/// True iff another detection covers at least `occlusion_overlap_ratio` of the
/// target box and the depths in the covered region have a median at least
/// `occlusion_depth_gap` nearer than the target box's own median.
pub fn occlusion_check(
    target: &Detection,
    others: &[Detection],
    depth_img: &DepthImage,
    config: &ClusterConfig,
) -> bool {
    let target_area = target.bbox.area();
    let Some(target_median) = median(extract_bbox_depths(depth_img, &target.bbox).values()) else {
        return false;
    };
    others.iter().filter(|o| *o != target).any(|other| {
        let Some(overlap) = target.bbox.intersection(&other.bbox) else {
            return false;
        };
        if overlap.area() / target_area < config.occlusion_overlap_ratio {
            return false;
        }
        median(extract_bbox_depths(depth_img, &overlap).values())
            .is_some_and(|m| m <= target_median - config.occlusion_depth_gap)
    })
}

/// Depth of the object a box was drawn around.
///
/// K-Means and Mean-Shift return the median of the foreground cluster
/// (unoccluded) or of the midground cluster (occluded). Averaging ignores the
/// occlusion flag. With fewer samples than clusters the plain median is returned.
pub fn estimate_target_depth(
    s: &DepthSamples,
    occluded: bool,
    config: &ClusterConfig,
) -> Result<f64, ClusterError> {
    if s.is_empty() {
        return Err(ClusterError::EmptySamples);
    }
    let wanted = usize::from(occluded);
    let clusters = match config.method {
        ClusterMethod::Averaging => return averaging_depth(s),
        ClusterMethod::Kmeans => {
            let k = if occluded { 3 } else { 2 };
            match kmeans_1d(s, k, &config.kmeans) {
                Ok(r) => r,
                Err(ClusterError::TooFewSamples { .. }) => {
                    return Ok(median(s.values()).expect("nonempty"));
                }
                Err(e) => return Err(e),
            }
        }
        ClusterMethod::MeanShift => mean_shift_1d(s, config.mean_shift_bandwidth)?,
    };
    let occupied = clusters.occupied();
    let pick = occupied[wanted.min(occupied.len() - 1)];
    Ok(median(&clusters.members(s.values(), pick)).expect("occupied cluster"))
}

/// Root mean square error between paired estimates and ground truth.
pub fn evaluate_depth_rmse(estimates: &[f64], truth: &[f64]) -> Result<f64, ClusterError> {
    if estimates.len() != truth.len() {
        return Err(ClusterError::LengthMismatch {
            estimates: estimates.len(),
            truth: truth.len(),
        });
    }
    if estimates.is_empty() {
        return Err(ClusterError::EmptySamples);
    }
    let mse = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t).powi(2))
        .sum::<f64>()
        / estimates.len() as f64;
    Ok(mse.sqrt())
}
