//! Detection evaluation: greedy IoU matching, precision-recall curves,
//! 101-point interpolated average precision, mAP@50 and mAP@50-95, and
//! max-F1 operating points.
//!
//! Conventions, fixed here so every number is reproducible:
//! - matching is greedy by descending confidence; a detection takes the
//!   highest-IoU unmatched ground truth at or above the threshold;
//! - the precision envelope is anchored at (recall 0, precision 1) whenever
//!   the curve achieves any positive recall, then made monotone
//!   non-increasing and sampled at the 101 recalls 0.00, 0.01, ..., 1.00;
//! - classes with zero ground truth have undefined AP and are excluded from
//!   mAP means;
//! - single precision/recall values are read at the max-F1 point of the
//!   pooled all-class curve, and the chosen confidence is reported.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::AnnotationRecord;
use crate::detector::Detection;
use crate::geometry::BBox;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("report format version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Outcome of matching one image's detections of one class against its
/// ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(detection index, gt index, iou)`, every IoU at or above threshold.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Detection indices left unmatched (false positives).
    pub unmatched_detections: Vec<usize>,
    /// Ground-truth indices left unmatched (false negatives).
    pub unmatched_gt: Vec<usize>,
}

/// Greedy matching: detections in descending confidence order (ties by input
/// index) each claim the unmatched ground truth with the highest IoU at or
/// above `iou_threshold`; IoU ties go to the lower ground-truth index.
pub fn match_detections(
    detections: &[(BBox, f64)],
    gts: &[BBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].1.total_cmp(&detections[a].1).then(a.cmp(&b)));

    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut unmatched_detections = Vec::new();
    for &det_idx in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gt_idx, gt) in gts.iter().enumerate() {
            if gt_taken[gt_idx] {
                continue;
            }
            let iou = detections[det_idx].0.iou(gt);
            if iou < iou_threshold {
                continue;
            }
            // strict improvement keeps the lower gt index on ties
            if best.is_none_or(|(_, best_iou)| iou > best_iou) {
                best = Some((gt_idx, iou));
            }
        }
        match best {
            Some((gt_idx, iou)) => {
                gt_taken[gt_idx] = true;
                pairs.push((det_idx, gt_idx, iou));
            }
            None => unmatched_detections.push(det_idx),
        }
    }
    unmatched_detections.sort_unstable();
    let unmatched_gt = (0..gts.len()).filter(|&g| !gt_taken[g]).collect();
    MatchResult {
        pairs,
        unmatched_detections,
        unmatched_gt,
    }
}

/// One detection pooled across images: its confidence and whether it
/// matched a ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledDetection {
    pub confidence: f64,
    pub is_tp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

/// Precision-recall curve with one point per detection rank. A curve with
/// `total_gt == 0` is undefined: it has no points and is excluded from AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub total_gt: usize,
}

impl PrCurve {
    pub fn is_defined(&self) -> bool {
        self.total_gt > 0
    }
}

/// Build the ranked curve from pooled detections. Sorting is stable, so
/// equal confidences keep their pooling order.
pub fn pr_curve(pooled: &[PooledDetection], total_gt: usize) -> PrCurve {
    if total_gt == 0 {
        return PrCurve {
            points: Vec::new(),
            total_gt: 0,
        };
    }
    let mut sorted: Vec<PooledDetection> = pooled.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut points = Vec::with_capacity(sorted.len());
    let mut tp_cum = 0usize;
    for (rank0, det) in sorted.iter().enumerate() {
        if det.is_tp {
            tp_cum += 1;
        }
        points.push(PrPoint {
            recall: tp_cum as f64 / total_gt as f64,
            precision: tp_cum as f64 / (rank0 + 1) as f64,
            confidence: det.confidence,
        });
    }
    PrCurve { points, total_gt }
}

/// 101-point interpolated average precision. `None` when the curve is
/// undefined (no ground truth); 0.0 when there are no detections or no
/// detection ever matches.
pub fn average_precision(curve: &PrCurve) -> Option<f64> {
    if !curve.is_defined() {
        return None;
    }
    if curve.points.is_empty() {
        return Some(0.0);
    }

    // Points arrive in rank order (recall non-decreasing). Anchor at
    // (0, 1) once any positive recall is achieved, then take the suffix
    // max so precision is monotone non-increasing in recall.
    let achieved_recall = curve.points.iter().any(|p| p.recall > 0.0);
    let mut anchored: Vec<(f64, f64)> = Vec::with_capacity(curve.points.len() + 1);
    if achieved_recall {
        anchored.push((0.0, 1.0));
    }
    anchored.extend(curve.points.iter().map(|p| (p.recall, p.precision)));
    anchored.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut envelope = vec![0.0f64; anchored.len()];
    let mut running = 0.0f64;
    for (i, &(_, precision)) in anchored.iter().enumerate().rev() {
        running = running.max(precision);
        envelope[i] = running;
    }

    let recalls: Vec<f64> = anchored.iter().map(|&(r, _)| r).collect();
    let mut total = 0.0f64;
    for k in 0..=100 {
        let sample = k as f64 / 100.0;
        // first point with recall >= sample
        let idx = recalls.partition_point(|&r| r < sample);
        if idx < envelope.len() {
            total += envelope[idx];
        }
    }
    Some(total / 101.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub precision: f64,
    pub recall: f64,
    pub confidence: f64,
    pub f1: f64,
}

/// The curve point maximizing F1; ties go to the higher confidence.
pub fn operating_point(curve: &PrCurve) -> Option<OperatingPoint> {
    let mut best: Option<OperatingPoint> = None;
    for p in &curve.points {
        let denom = p.precision + p.recall;
        let f1 = if denom > 0.0 {
            2.0 * p.precision * p.recall / denom
        } else {
            0.0
        };
        let better = match &best {
            None => true,
            Some(b) => f1 > b.f1 || (f1 == b.f1 && p.confidence > b.confidence),
        };
        if better {
            best = Some(OperatingPoint {
                precision: p.precision,
                recall: p.recall,
                confidence: p.confidence,
                f1,
            });
        }
    }
    best
}

/// TP/FP/FN totals at the primary IoU threshold, over all detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: u32,
    pub class_name: String,
    pub total_gt: usize,
    /// AP per IoU threshold, parallel to `config.iou_thresholds`; `None`
    /// when this class has no ground truth.
    pub ap_by_threshold: Vec<Option<f64>>,
    /// Curve at the primary IoU threshold.
    pub pr_curve: PrCurve,
    pub operating_point: Option<OperatingPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub primary_iou: f64,
    pub class_names: Vec<String>,
}

impl EvalConfig {
    pub fn coco(class_names: Vec<String>) -> Self {
        EvalConfig {
            iou_thresholds: coco_iou_thresholds(),
            primary_iou: 0.5,
            class_names,
        }
    }
}

/// Full evaluation output. `precision`/`recall` are the pooled max-F1
/// operating point at the primary IoU threshold; per-class values live in
/// `classes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config: EvalConfig,
    pub classes: Vec<ClassEval>,
    /// Mean AP over defined classes, per IoU threshold.
    pub map_by_threshold: Vec<Option<f64>>,
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub operating_confidence: Option<f64>,
    pub counts: Counts,
}

/// Evaluate pooled detections against ground truth across any number of
/// images. Detections for image ids absent from the ground truth count as
/// false positives on an empty image.
pub fn evaluate(
    gt_records: &[AnnotationRecord],
    detections: &[Detection],
    config: &EvalConfig,
) -> EvalReport {
    let class_count = config.class_names.len();

    // group per image, then per class: (boxes, confidences) and gt boxes
    let mut images: BTreeMap<&str, (Vec<&AnnotationRecord>, Vec<&Detection>)> = BTreeMap::new();
    for record in gt_records {
        images
            .entry(record.image_id.as_str())
            .or_default()
            .0
            .push(record);
    }
    for det in detections {
        images.entry(det.image_id.as_str()).or_default().1.push(det);
    }

    struct ImageClass {
        det_boxes: Vec<(BBox, f64)>,
        gt_boxes: Vec<BBox>,
    }
    // ordered by image id for deterministic pooling
    let mut grouped: Vec<Vec<ImageClass>> = Vec::new();
    for (records, dets) in images.values() {
        let mut per_class: Vec<ImageClass> = (0..class_count)
            .map(|_| ImageClass {
                det_boxes: Vec::new(),
                gt_boxes: Vec::new(),
            })
            .collect();
        for record in records {
            for inst in &record.instances {
                if (inst.class_id as usize) < class_count {
                    per_class[inst.class_id as usize].gt_boxes.push(inst.bbox);
                }
            }
        }
        for det in dets {
            if (det.class_id as usize) < class_count {
                per_class[det.class_id as usize]
                    .det_boxes
                    .push((det.bbox, det.confidence));
            }
        }
        grouped.push(per_class);
    }

    let total_gt_per_class: Vec<usize> = (0..class_count)
        .map(|c| grouped.iter().map(|img| img[c].gt_boxes.len()).sum())
        .collect();

    // AP per class per threshold
    let mut ap_table: Vec<Vec<Option<f64>>> = vec![Vec::new(); class_count];
    let mut primary_curves: Vec<PrCurve> = Vec::new();
    let mut counts = Counts::default();
    let mut pooled_all: Vec<PooledDetection> = Vec::new();

    for class in 0..class_count {
        // thresholds are independent; matching parallelizes cleanly and the
        // ordered collect keeps results identical for any worker count
        ap_table[class] = config
            .iou_thresholds
            .par_iter()
            .map(|&threshold| {
                let mut pooled = Vec::new();
                for img in &grouped {
                    let ic = &img[class];
                    let result = match_detections(&ic.det_boxes, &ic.gt_boxes, threshold);
                    let mut is_tp = vec![false; ic.det_boxes.len()];
                    for &(det_idx, _, _) in &result.pairs {
                        is_tp[det_idx] = true;
                    }
                    for (det_idx, &(_, confidence)) in ic.det_boxes.iter().enumerate() {
                        pooled.push(PooledDetection {
                            confidence,
                            is_tp: is_tp[det_idx],
                        });
                    }
                }
                let curve = pr_curve(&pooled, total_gt_per_class[class]);
                average_precision(&curve)
            })
            .collect();

        // primary-threshold pass: curve, counts, pooled operating data
        let mut pooled = Vec::new();
        for img in &grouped {
            let ic = &img[class];
            let result = match_detections(&ic.det_boxes, &ic.gt_boxes, config.primary_iou);
            counts.true_positives += result.pairs.len();
            counts.false_positives += result.unmatched_detections.len();
            counts.false_negatives += result.unmatched_gt.len();
            let mut is_tp = vec![false; ic.det_boxes.len()];
            for &(det_idx, _, _) in &result.pairs {
                is_tp[det_idx] = true;
            }
            for (det_idx, &(_, confidence)) in ic.det_boxes.iter().enumerate() {
                pooled.push(PooledDetection {
                    confidence,
                    is_tp: is_tp[det_idx],
                });
            }
        }
        pooled_all.extend(pooled.iter().copied());
        primary_curves.push(pr_curve(&pooled, total_gt_per_class[class]));
    }

    let classes: Vec<ClassEval> = (0..class_count)
        .map(|c| ClassEval {
            class_id: c as u32,
            class_name: config.class_names[c].clone(),
            total_gt: total_gt_per_class[c],
            ap_by_threshold: ap_table[c].clone(),
            operating_point: operating_point(&primary_curves[c]),
            pr_curve: primary_curves[c].clone(),
        })
        .collect();

    // mean over defined classes at each threshold
    let map_by_threshold: Vec<Option<f64>> = (0..config.iou_thresholds.len())
        .map(|t| {
            let defined: Vec<f64> = (0..class_count).filter_map(|c| ap_table[c][t]).collect();
            if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            }
        })
        .collect();

    let map50 = config
        .iou_thresholds
        .iter()
        .position(|&t| (t - 0.5).abs() < 1e-9)
        .and_then(|idx| map_by_threshold[idx]);
    let defined_maps: Vec<f64> = map_by_threshold.iter().filter_map(|&m| m).collect();
    let map50_95 = if defined_maps.len() == map_by_threshold.len() && !defined_maps.is_empty() {
        Some(defined_maps.iter().sum::<f64>() / defined_maps.len() as f64)
    } else {
        None
    };

    let total_gt_all: usize = total_gt_per_class.iter().sum();
    let pooled_curve = pr_curve(&pooled_all, total_gt_all);
    let pooled_op = operating_point(&pooled_curve);

    EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        config: config.clone(),
        classes,
        map_by_threshold,
        map50,
        map50_95,
        precision: pooled_op.map(|op| op.precision),
        recall: pooled_op.map(|op| op.recall),
        operating_confidence: pooled_op.map(|op| op.confidence),
        counts,
    }
}

impl EvalReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self, EvalError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(found) = value.get("format_version").and_then(|v| v.as_u64()) {
            if found != u64::from(REPORT_FORMAT_VERSION) {
                return Err(EvalError::SchemaVersion {
                    found: found as u32,
                    expected: REPORT_FORMAT_VERSION,
                });
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json_string()).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Flat `class,iou_threshold,ap` rows; undefined APs render empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou_threshold,ap\n");
        for class in &self.classes {
            for (threshold, ap) in self
                .config
                .iou_thresholds
                .iter()
                .zip(&class.ap_by_threshold)
            {
                let ap_text = ap.map(|v| format!("{v:.6}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{:.2},{}\n",
                    class.class_name, threshold, ap_text
                ));
            }
        }
        out
    }

    /// Summary table: one row per class plus an `all` row.
    pub fn render_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>9} {:>7} {:>7} {:>10}\n",
            "Class", "Precision", "Recall", "mAP@50", "mAP@50-95"
        ));
        out.push_str(&format!(
            "{:<12} {:>9} {:>7} {:>7} {:>10}\n",
            "all",
            cell(self.precision),
            cell(self.recall),
            cell(self.map50),
            cell(self.map50_95),
        ));
        for class in &self.classes {
            let ap50 = self
                .config
                .iou_thresholds
                .iter()
                .position(|&t| (t - 0.5).abs() < 1e-9)
                .and_then(|idx| class.ap_by_threshold[idx]);
            let defined: Vec<f64> = class.ap_by_threshold.iter().filter_map(|&a| a).collect();
            let mean_ap = if defined.len() == class.ap_by_threshold.len() && !defined.is_empty() {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            } else {
                None
            };
            out.push_str(&format!(
                "{:<12} {:>9} {:>7} {:>7} {:>10}\n",
                class.class_name,
                cell(class.operating_point.map(|op| op.precision)),
                cell(class.operating_point.map(|op| op.recall)),
                cell(ap50),
                cell(mean_ap),
            ));
        }
        out
    }
}
