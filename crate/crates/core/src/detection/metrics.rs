//! Box matching and detection metrics (P, R, AP, mAP).
//!
//! Matching is greedy in descending confidence, class-aware, and pairs each
//! ground-truth box with at most one detection. AP uses all-point interpolation:
//! precision at each recall level is replaced by the maximum precision at any
//! recall at or above it, then integrated over the observed recall steps.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use super::{BBox, ClassLabel, Detection};

/// IoU thresholds 0.50:0.05:0.95 used for mAP50-95.
pub const IOU_SWEEP: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("average precision is undefined without ground truth")]
    ZeroGroundTruth,
    #[error("no classes to average")]
    NoClasses,
    #[error("IoU threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredHit {
    pub confidence: f64,
    pub true_positive: bool,
}

/// Per-class outcome of matching: TP/FP flags by descending confidence, plus GT count.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClassMatches {
    pub hits: Vec<ScoredHit>,
    pub gt_count: usize,
}

impl ClassMatches {
    pub fn true_positives(&self) -> usize {
        self.hits.iter().filter(|h| h.true_positive).count()
    }

    pub fn false_positives(&self) -> usize {
        self.hits.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_count - self.true_positives()
    }

    pub fn flags(&self) -> Vec<bool> {
        self.hits.iter().map(|h| h.true_positive).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub classes: BTreeMap<ClassLabel, ClassMatches>,
}

impl MatchResult {
    pub fn class(&self, label: ClassLabel) -> Option<&ClassMatches> {
        self.classes.get(&label)
    }

    /// Pools another image's matches into this one, keeping hits ordered by
    /// descending confidence (ties keep insertion order).
    pub fn merge(&mut self, other: MatchResult) {
        for (label, m) in other.classes {
            let entry = self.classes.entry(label).or_default();
            entry.gt_count += m.gt_count;
            entry.hits.extend(m.hits);
            entry
                .hits
                .sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        }
    }
}

fn by_confidence_desc(dets: &[Detection]) -> Vec<&Detection> {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    sorted
}

/// Matches the detections of one image against its ground truth.
pub fn match_detections(dets: &[Detection], gts: &[Detection], iou_thresh: f64) -> MatchResult {
    let mut result = MatchResult::default();
    for gt in gts {
        result.classes.entry(gt.label).or_default().gt_count += 1;
    }
    let mut taken = vec![false; gts.len()];
    for det in by_confidence_desc(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (i, gt) in gts.iter().enumerate() {
            if taken[i] || gt.label != det.label {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((i, overlap));
            }
        }
        let true_positive = match best {
            Some((i, overlap)) if overlap >= iou_thresh => {
                taken[i] = true;
                true
            }
            _ => false,
        };
        result
            .classes
            .entry(det.label)
            .or_default()
            .hits
            .push(ScoredHit {
                confidence: det.confidence,
                true_positive,
            });
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `P = TP / (TP + FP)`, `R = TP / (TP + FN)`, each 0 when its denominator is 0.
pub fn precision_recall(m: &MatchResult) -> BTreeMap<ClassLabel, PrecisionRecall> {
    m.classes
        .iter()
        .map(|(label, c)| {
            let tp = c.true_positives();
            (
                *label,
                PrecisionRecall {
                    precision: ratio(tp, c.hits.len()),
                    recall: ratio(tp, c.gt_count),
                },
            )
        })
        .collect()
}

/// Area under the interpolated precision/recall curve of a confidence-ordered
/// TP/FP sequence.
pub fn average_precision(flags: &[bool], gt_count: usize) -> Result<f64, MetricsError> {
    if gt_count == 0 {
        return Err(MetricsError::ZeroGroundTruth);
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// `mAP = Σ APᵢ / N`.
pub fn mean_ap(per_class: &BTreeMap<ClassLabel, f64>) -> Result<f64, MetricsError> {
    if per_class.is_empty() {
        return Err(MetricsError::NoClasses);
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Per-class AP at one IoU threshold, over classes that have ground truth.
fn class_aps(frames: &[(Vec<Detection>, Vec<Detection>)], iou_thresh: f64) -> BTreeMap<ClassLabel, f64> {
    let mut pooled = MatchResult::default();
    for (dets, gts) in frames {
        pooled.merge(match_detections(dets, gts, iou_thresh));
    }
    pooled
        .classes
        .iter()
        .filter_map(|(label, m)| Some((*label, average_precision(&m.flags(), m.gt_count).ok()?)))
        .collect()
}

/// mAP averaged over [`IOU_SWEEP`] for `(detections, ground_truth)` image pairs.
pub fn map50_95(frames: &[(Vec<Detection>, Vec<Detection>)]) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    for t in IOU_SWEEP {
        total += mean_ap(&class_aps(frames, t))?;
    }
    Ok(total / IOU_SWEEP.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassEvaluation {
    pub label: ClassLabel,
    pub gt_count: usize,
    pub det_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap50_95: f64,
    /// AP at any additionally requested IoU thresholds.
    pub ap_at: Vec<(f64, f64)>,
}

/// Per-class table plus macro means over the classes present in ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub frames: usize,
    pub classes: Vec<ClassEvaluation>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub map_at: Vec<(f64, f64)>,
}

/// Accumulates image-level detections and ground truth for a dataset-level report.
#[derive(Debug, Clone, Default)]
pub struct DetectionEvaluator {
    frames: Vec<(Vec<Detection>, Vec<Detection>)>,
}

impl DetectionEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_frame(&mut self, detections: Vec<Detection>, ground_truth: Vec<Detection>) {
        self.frames.push((detections, ground_truth));
    }

    pub fn report(&self, extra_thresholds: &[f64]) -> Result<EvaluationReport, MetricsError> {
        if let Some(&bad) = extra_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(MetricsError::InvalidThreshold(bad));
        }
        let mut pooled = MatchResult::default();
        for (dets, gts) in &self.frames {
            pooled.merge(match_detections(dets, gts, 0.5));
        }
        let pr = precision_recall(&pooled);
        let sweep: Vec<BTreeMap<ClassLabel, f64>> =
            IOU_SWEEP.iter().map(|t| class_aps(&self.frames, *t)).collect();
        let extra: Vec<BTreeMap<ClassLabel, f64>> =
            extra_thresholds.iter().map(|t| class_aps(&self.frames, *t)).collect();

        let classes: Vec<ClassEvaluation> = pooled
            .classes
            .iter()
            .filter(|(_, m)| m.gt_count > 0)
            .map(|(label, m)| ClassEvaluation {
                label: *label,
                gt_count: m.gt_count,
                det_count: m.hits.len(),
                precision: pr[label].precision,
                recall: pr[label].recall,
                ap50: sweep[0][label],
                ap50_95: sweep.iter().map(|s| s[label]).sum::<f64>() / sweep.len() as f64,
                ap_at: extra_thresholds
                    .iter()
                    .zip(&extra)
                    .map(|(t, s)| (*t, s[label]))
                    .collect(),
            })
            .collect();
        if classes.is_empty() {
            return Err(MetricsError::NoClasses);
        }
        let n = classes.len() as f64;
        let mean_of = |f: &dyn Fn(&ClassEvaluation) -> f64| classes.iter().map(f).sum::<f64>() / n;
        Ok(EvaluationReport {
            frames: self.frames.len(),
            mean_precision: mean_of(&|c| c.precision),
            mean_recall: mean_of(&|c| c.recall),
            map50: mean_of(&|c| c.ap50),
            map50_95: mean_of(&|c| c.ap50_95),
            map_at: extra_thresholds
                .iter()
                .enumerate()
                .map(|(i, t)| (*t, mean_of(&|c| c.ap_at[i].1)))
                .collect(),
            classes,
        })
    }
}
