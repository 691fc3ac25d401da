//! Per-class precision/recall and average precision for the multi-label
//! lesion detector.
//!
//! Multi-label ground-truth boxes are expanded into one instance per active
//! class. Predictions are scored per class as `objectness * confidence`.
//! AP integrates the all-point interpolated PR curve, with one curve point
//! per distinct score so that tied scores do not depend on input order.

use serde::Serialize;

use crate::error::{check_unit, Result};
use crate::geometry::{iou, ScoredBox, DEFAULT_CONF_THRESHOLD};
use crate::model::{BBoxXyxy, ClassSet, SceneGraph};
use crate::taxonomy::{remove_root_redundancy, LesionTaxonomy};

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub bbox: BBoxXyxy,
    pub classes: ClassSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvalImage {
    pub image_id: String,
    pub gt: Vec<GtBox>,
    pub predictions: Vec<ScoredBox>,
}

/// Lesion ground truth for one image: each lesion-bearing region box with
/// its root-reduced label set, identical boxes merged.
pub fn lesion_ground_truth(sg: &SceneGraph, taxonomy: &LesionTaxonomy) -> Vec<GtBox> {
    let mut out: Vec<GtBox> = Vec::new();
    for entry in sg.regions.iter().filter(|e| !e.lesions.is_empty()) {
        let classes = remove_root_redundancy(taxonomy, &entry.lesions);
        match out.iter_mut().find(|g| g.bbox == entry.bbox) {
            Some(g) => g.classes.extend(classes),
            None => out.push(GtBox {
                bbox: entry.bbox,
                classes,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub conf_threshold: f64,
    /// Also report mAP averaged over IoU 0.50, 0.55, ..., 0.95.
    pub coco_sweep: bool,
}

impl Default for DetectionEvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5, 0.95],
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            coco_sweep: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassResult {
    pub class: usize,
    pub gt_count: usize,
    pub ap: f64,
    /// At the confidence threshold.
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassResult>,
    /// Means over classes that have ground truth.
    pub map: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionEvalResult {
    pub conf_threshold: f64,
    pub thresholds: Vec<ThresholdResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_coco: Option<f64>,
    /// Classes with no ground-truth instance; left out of every mean.
    pub classes_without_gt: Vec<usize>,
}

impl DetectionEvalResult {
    /// One warning per class without ground truth, using `names` when given.
    pub fn warnings(&self, names: Option<&[String]>) -> Vec<String> {
        let mut out: Vec<String> = self
            .classes_without_gt
            .iter()
            .map(|&c| {
                let label = names
                    .and_then(|n| n.get(c))
                    .map_or_else(|| c.to_string(), |n| format!("{n:?}"));
                format!("class {label} has no ground-truth instances; excluded from means")
            })
            .collect();
        if self.thresholds.iter().all(|t| t.per_class.is_empty()) {
            out.push("no ground-truth instances for any class; means reported as 0".into());
        }
        out
    }

    pub fn at(&self, iou_threshold: f64) -> Option<&ThresholdResult> {
        self.thresholds
            .iter()
            .find(|t| (t.iou_threshold - iou_threshold).abs() < 1e-12)
    }
}

/// A scored prediction of one class with its match outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPrediction {
    pub score: f64,
    pub tp: bool,
}

/// Greedy per-image matching for one class: predictions in descending score
/// (lower index first on ties) each take the unmatched ground-truth box with
/// the highest IoU, if that IoU reaches the threshold.
pub fn match_class(image: &DetectionEvalImage, class: usize, iou_threshold: f64) -> (Vec<MatchedPrediction>, usize) {
    let gts: Vec<&BBoxXyxy> = image
        .gt
        .iter()
        .filter(|g| g.classes.contains(&class))
        .map(|g| &g.bbox)
        .collect();
    let mut preds: Vec<(usize, f64)> = image
        .predictions
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.class_score(class)))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    preds.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut used = vec![false; gts.len()];
    let matched = preds
        .into_iter()
        .map(|(i, score)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(&image.predictions[i].bbox, gt);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            MatchedPrediction {
                score,
                tp: best.is_some(),
            }
        })
        .collect();
    (matched, gts.len())
}

/// All-point interpolated AP with one PR point per distinct score.
pub fn average_precision(preds: &[MatchedPrediction], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut sorted = preds.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].tp {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / gt_count as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope, right to left
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

pub fn detection_eval(
    images: &[DetectionEvalImage],
    num_classes: usize,
    cfg: &DetectionEvalConfig,
) -> Result<DetectionEvalResult> {
    check_unit("confidence threshold", cfg.conf_threshold)?;
    for &t in &cfg.iou_thresholds {
        check_unit("IoU threshold", t)?;
    }
    let gt_counts: Vec<usize> = (0..num_classes)
        .map(|c| {
            images
                .iter()
                .map(|im| im.gt.iter().filter(|g| g.classes.contains(&c)).count())
                .sum()
        })
        .collect();
    let classes_without_gt: Vec<usize> = (0..num_classes).filter(|&c| gt_counts[c] == 0).collect();

    let eval_threshold = |t: f64| -> ThresholdResult {
        let per_class: Vec<ClassResult> = (0..num_classes)
            .filter(|&c| gt_counts[c] > 0)
            .map(|c| {
                let mut all = Vec::new();
                for im in images {
                    all.extend(match_class(im, c, t).0);
                }
                let above: Vec<&MatchedPrediction> =
                    all.iter().filter(|m| m.score >= cfg.conf_threshold).collect();
                let tp = above.iter().filter(|m| m.tp).count();
                let fp = above.len() - tp;
                ClassResult {
                    class: c,
                    gt_count: gt_counts[c],
                    ap: average_precision(&all, gt_counts[c]),
                    precision: if above.is_empty() { 0.0 } else { tp as f64 / above.len() as f64 },
                    recall: tp as f64 / gt_counts[c] as f64,
                    tp,
                    fp,
                }
            })
            .collect();
        let mean = |f: fn(&ClassResult) -> f64| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
            }
        };
        ThresholdResult {
            iou_threshold: t,
            map: mean(|c| c.ap),
            mean_precision: mean(|c| c.precision),
            mean_recall: mean(|c| c.recall),
            per_class,
        }
    };

    let thresholds: Vec<ThresholdResult> = cfg.iou_thresholds.iter().map(|&t| eval_threshold(t)).collect();
    let map_coco = cfg.coco_sweep.then(|| {
        let sweep: Vec<f64> = (0..10).map(|k| 0.5 + 0.05 * k as f64).collect();
        sweep.iter().map(|&t| eval_threshold(t).map).sum::<f64>() / sweep.len() as f64
    });
    Ok(DetectionEvalResult {
        conf_threshold: cfg.conf_threshold,
        thresholds,
        map_coco,
        classes_without_gt,
    })
}
