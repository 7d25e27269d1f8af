//! COCO-style detection scoring: IoU, per-class average precision, mAP over
//! an IoU-threshold grid, and the averaged-over-experiences challenge score.
//!
//! The production path here is linear-time per label; [`reference`] holds an
//! intentionally slow brute-force evaluator that the test suites compare
//! against. Keep the two implementations independent.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Corner-form box: `[x_min, y_min, x_max, y_max]`, exclusive max corner.
pub type Box4 = [f64; 4];

/// Full-scale challenge buffer-and-score context: the published winning
/// average-mAP figures for the two tracks. Desk-scale runs do not approach
/// these; they are kept for orientation only.
pub const TRACK2_REFERENCE_AVG_MAP: f64 = 0.5594;
pub const TRACK3_REFERENCE_AVG_MAP: f64 = 0.5465;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate box {0:?}: zero or negative area")]
    DegenerateBox(Box4),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("empty score list")]
    EmptyScoreList,
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
}

/// Which id stream labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    Category,
    Instance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Strictly ascending IoU thresholds in (0, 1].
    pub iou_thresholds: Vec<f64>,
    pub label_space: LabelSpace,
    /// Score only the reference (main) object of each image.
    pub reference_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: coco_iou_grid(),
            label_space: LabelSpace::Category,
            reference_only: false,
        }
    }
}

/// The 0.50:0.05:0.95 threshold grid.
pub fn coco_iou_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

impl EvalConfig {
    /// Single-threshold 0.5 variant.
    pub fn at_iou_50(label_space: LabelSpace, reference_only: bool) -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5],
            label_space,
            reference_only,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_thresholds.is_empty() {
            return Err(EvalError::InvalidConfig("no IoU thresholds".into()));
        }
        for (i, &t) in self.iou_thresholds.iter().enumerate() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(EvalError::InvalidConfig(format!(
                    "threshold {t} outside (0, 1]"
                )));
            }
            if i > 0 && t <= self.iou_thresholds[i - 1] {
                return Err(EvalError::InvalidConfig(
                    "thresholds not strictly ascending".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One scored prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box4,
    pub label: u32,
    pub score: f64,
}

/// One annotated ground-truth object.
#[derive(Debug, Clone)]
pub struct GtObject {
    pub bbox: Box4,
    pub label: u32,
    /// Main object of the frame's video (Track 3 scoring target).
    pub is_reference: bool,
}

/// Per-experience mAP list plus their mean.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperienceScores {
    pub per_experience_map: Vec<f64>,
    pub average_map: f64,
}

impl ExperienceScores {
    pub fn new(per_experience_map: Vec<f64>) -> Result<Self, EvalError> {
        let average_map = average_map(&per_experience_map)?;
        Ok(ExperienceScores {
            per_experience_map,
            average_map,
        })
    }
}

/// Intersection-over-union of two corner boxes.
pub fn iou(a: &Box4, b: &Box4) -> Result<f64, EvalError> {
    check_box(a)?;
    check_box(b)?;
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    Ok(inter / union)
}

fn area(b: &Box4) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn check_box(b: &Box4) -> Result<(), EvalError> {
    if b[0] < b[2] && b[1] < b[3] {
        Ok(())
    } else {
        Err(EvalError::DegenerateBox(*b))
    }
}

/// Greedy TP/FP assignment. `predictions` must already be sorted by score
/// descending (ties keep insertion order); each prediction matches the
/// unmatched same-label ground truth of highest IoU at or above the
/// threshold, and each ground truth matches at most once.
pub fn match_detections(
    predictions: &[Detection],
    ground_truth: &[GtObject],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut taken = vec![false; ground_truth.len()];
    let mut flags = Vec::with_capacity(predictions.len());
    for pred in predictions {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truth.iter().enumerate() {
            if taken[gi] || gt.label != pred.label {
                continue;
            }
            let v = iou(&pred.bbox, &gt.bbox).unwrap_or(0.0);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// All-points interpolated average precision from ranked TP/FP flags.
///
/// The precision envelope (running max from the right) is integrated over
/// recall. With no ground truth, AP is 0 if any predictions exist and 1 if
/// both sides are empty.
pub fn average_precision(flags: &[bool], num_ground_truth: usize) -> f64 {
    if num_ground_truth == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let n = flags.len();
    let mut tp_after = vec![0usize; n + 1];
    for i in 0..n {
        tp_after[i + 1] = tp_after[i] + flags[i] as usize;
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for rank in (1..=n).rev() {
        let precision = tp_after[rank] as f64 / rank as f64;
        envelope = envelope.max(precision);
        if flags[rank - 1] {
            // one recall step of 1/num_gt at this TP
            ap += envelope / num_ground_truth as f64;
        }
    }
    ap
}

/// Per-label APs averaged over the IoU-threshold grid, plus their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    /// AP per label (averaged over thresholds), labels present in gt only.
    pub per_label_ap: BTreeMap<u32, f64>,
}

/// Pooled evaluation over a test set: AP per (label, threshold) with
/// per-image greedy matching and test-set-wide ranking, averaged over labels
/// present in the ground truth, then over thresholds.
pub fn evaluate(
    predictions_by_image: &[Vec<Detection>],
    ground_truth_by_image: &[Vec<GtObject>],
    cfg: &EvalConfig,
) -> Result<EvalResult, EvalError> {
    cfg.validate()?;
    if ground_truth_by_image.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    assert_eq!(
        predictions_by_image.len(),
        ground_truth_by_image.len(),
        "prediction/ground-truth image counts differ"
    );

    // Reference-only mode scores against main objects exclusively.
    let gts: Vec<Vec<&GtObject>> = ground_truth_by_image
        .iter()
        .map(|gs| {
            gs.iter()
                .filter(|g| !cfg.reference_only || g.is_reference)
                .collect()
        })
        .collect();

    let labels: BTreeSet<u32> = gts
        .iter()
        .flat_map(|gs| gs.iter().map(|g| g.label))
        .collect();

    let mut per_label_ap = BTreeMap::new();
    if labels.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }

    for &label in &labels {
        let gt_count: usize = gts
            .iter()
            .map(|gs| gs.iter().filter(|g| g.label == label).count())
            .sum();
        let mut ap_sum = 0.0;
        for &thr in &cfg.iou_thresholds {
            // (score, image, insertion index, flag) pooled over the test set.
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
            for (img, preds) in predictions_by_image.iter().enumerate() {
                let mut ranked: Vec<(usize, &Detection)> = preds
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.label == label)
                    .collect();
                ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
                let img_gts: Vec<GtObject> = gts[img]
                    .iter()
                    .filter(|g| g.label == label)
                    .map(|g| (*g).clone())
                    .collect();
                let dets: Vec<Detection> = ranked.iter().map(|(_, p)| (*p).clone()).collect();
                let flags = match_detections(&dets, &img_gts, thr);
                for ((idx, p), flag) in ranked.iter().zip(flags) {
                    pooled.push((p.score, img, *idx, flag));
                }
            }
            pooled.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let flags: Vec<bool> = pooled.iter().map(|e| e.3).collect();
            ap_sum += average_precision(&flags, gt_count);
        }
        per_label_ap.insert(label, ap_sum / cfg.iou_thresholds.len() as f64);
    }

    let map = average_map(&per_label_ap.values().copied().collect::<Vec<_>>())?;
    Ok(EvalResult { map, per_label_ap })
}

/// mAP over the pooled test set; see [`evaluate`] for the full result.
pub fn mean_average_precision(
    predictions_by_image: &[Vec<Detection>],
    ground_truth_by_image: &[Vec<GtObject>],
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    Ok(evaluate(predictions_by_image, ground_truth_by_image, cfg)?.map)
}

/// Arithmetic mean of per-experience mAP values.
///
/// Computed as `first + mean(deltas)` so clustered inputs lose no precision;
/// in particular the mean of equal values is exactly that value.
pub fn average_map(per_experience_maps: &[f64]) -> Result<f64, EvalError> {
    if per_experience_maps.is_empty() {
        return Err(EvalError::EmptyScoreList);
    }
    let first = per_experience_maps[0];
    let delta_sum: f64 = per_experience_maps.iter().map(|v| v - first).sum();
    Ok(first + delta_sum / per_experience_maps.len() as f64)
}

pub mod reference {
    //! Brute-force reference evaluator for the test suites.
    //!
    //! Everything here is deliberately quadratic and written from the metric
    //! definitions, not shared with the production path: precision/recall are
    //! recomputed per prefix and the envelope scans all prefixes.

    use super::{Box4, Detection, EvalConfig, GtObject};
    use std::collections::BTreeSet;

    /// IoU via symmetric sweep of min/max corners, no shared helpers.
    pub fn iou_pixel_count(a: &Box4, b: &Box4, cells_per_unit: usize) -> f64 {
        // Fine-grid cell counting over the bounding region of both boxes.
        let x0 = a[0].min(b[0]);
        let y0 = a[1].min(b[1]);
        let x1 = a[2].max(b[2]);
        let y1 = a[3].max(b[3]);
        let step = 1.0 / cells_per_unit as f64;
        let nx = ((x1 - x0) / step).ceil() as usize;
        let ny = ((y1 - y0) / step).ceil() as usize;
        let mut inter = 0usize;
        let mut union = 0usize;
        for iy in 0..ny {
            let cy = y0 + (iy as f64 + 0.5) * step;
            for ix in 0..nx {
                let cx = x0 + (ix as f64 + 0.5) * step;
                let in_a = cx > a[0] && cx < a[2] && cy > a[1] && cy < a[3];
                let in_b = cx > b[0] && cx < b[2] && cy > b[1] && cy < b[3];
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    /// All-points AP by explicit prefix scans (quadratic).
    pub fn ap_prefix_scan(flags: &[bool], num_gt: usize) -> f64 {
        if num_gt == 0 {
            return if flags.is_empty() { 1.0 } else { 0.0 };
        }
        let n = flags.len();
        let tp_in = |j: usize| flags[..j].iter().filter(|&&f| f).count();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for j in 1..=n {
            if flags[j - 1] {
                let recall = tp_in(j) as f64 / num_gt as f64;
                let mut p_env: f64 = 0.0;
                for i in 1..=n {
                    if tp_in(i) as f64 / num_gt as f64 >= recall - 1e-12 {
                        p_env = p_env.max(tp_in(i) as f64 / i as f64);
                    }
                }
                ap += (recall - prev_recall) * p_env;
                prev_recall = recall;
            }
        }
        ap
    }

    /// Greedy matcher re-stated with explicit candidate enumeration.
    pub fn match_greedy(
        predictions: &[Detection],
        ground_truth: &[GtObject],
        thr: f64,
    ) -> Vec<bool> {
        let mut used: BTreeSet<usize> = BTreeSet::new();
        let mut out = Vec::new();
        for p in predictions {
            let mut candidates: Vec<(usize, f64)> = Vec::new();
            for (gi, g) in ground_truth.iter().enumerate() {
                if used.contains(&gi) || g.label != p.label {
                    continue;
                }
                let ix = (p.bbox[2].min(g.bbox[2]) - p.bbox[0].max(g.bbox[0])).max(0.0);
                let iy = (p.bbox[3].min(g.bbox[3]) - p.bbox[1].max(g.bbox[1])).max(0.0);
                let inter = ix * iy;
                let ua = (p.bbox[2] - p.bbox[0]) * (p.bbox[3] - p.bbox[1])
                    + (g.bbox[2] - g.bbox[0]) * (g.bbox[3] - g.bbox[1])
                    - inter;
                let v = inter / ua;
                if v >= thr {
                    candidates.push((gi, v));
                }
            }
            // highest IoU wins, lowest index breaks ties
            candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            if let Some(&(gi, _)) = candidates.first() {
                used.insert(gi);
                out.push(true);
            } else {
                out.push(false);
            }
        }
        out
    }

    /// End-to-end slow evaluator over all labels and thresholds.
    pub fn evaluate_slow(
        predictions_by_image: &[Vec<Detection>],
        ground_truth_by_image: &[Vec<GtObject>],
        cfg: &EvalConfig,
    ) -> f64 {
        let gts: Vec<Vec<GtObject>> = ground_truth_by_image
            .iter()
            .map(|gs| {
                gs.iter()
                    .filter(|g| !cfg.reference_only || g.is_reference)
                    .cloned()
                    .collect()
            })
            .collect();
        let mut labels: Vec<u32> = gts
            .iter()
            .flat_map(|gs| gs.iter().map(|g| g.label))
            .collect();
        labels.sort_unstable();
        labels.dedup();

        let mut label_aps = Vec::new();
        for &label in &labels {
            let num_gt: usize = gts
                .iter()
                .map(|gs| gs.iter().filter(|g| g.label == label).count())
                .sum();
            let mut thr_aps = Vec::new();
            for &thr in &cfg.iou_thresholds {
                let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
                for (img, preds) in predictions_by_image.iter().enumerate() {
                    let mut mine: Vec<(usize, Detection)> = preds
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| p.label == label)
                        .map(|(i, p)| (i, p.clone()))
                        .collect();
                    mine.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
                    let gs: Vec<GtObject> = gts[img]
                        .iter()
                        .filter(|g| g.label == label)
                        .cloned()
                        .collect();
                    let ordered: Vec<Detection> = mine.iter().map(|(_, p)| p.clone()).collect();
                    let flags = match_greedy(&ordered, &gs, thr);
                    for ((orig_idx, p), f) in mine.iter().zip(flags) {
                        pooled.push((p.score, img, *orig_idx, f));
                    }
                }
                pooled.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0)
                        .unwrap()
                        .then(a.1.cmp(&b.1))
                        .then(a.2.cmp(&b.2))
                });
                let flags: Vec<bool> = pooled.iter().map(|e| e.3).collect();
                thr_aps.push(ap_prefix_scan(&flags, num_gt));
            }
            label_aps.push(thr_aps.iter().sum::<f64>() / thr_aps.len() as f64);
        }
        label_aps.iter().sum::<f64>() / label_aps.len() as f64
    }
}
