//! IoU and multi-label non-maximum suppression.

use crate::error::{check_unit, Result};
use crate::model::BBoxXyxy;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.35;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// A lesion detector output: one box carrying a confidence per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBoxXyxy,
    pub objectness: f64,
    pub class_conf: Vec<f64>,
}

impl ScoredBox {
    pub fn new(bbox: BBoxXyxy, objectness: f64, class_conf: Vec<f64>) -> Result<Self> {
        check_unit("objectness", objectness)?;
        for &c in &class_conf {
            check_unit("class confidence", c)?;
        }
        Ok(Self {
            bbox,
            objectness,
            class_conf,
        })
    }

    /// `objectness * max class confidence`.
    pub fn score(&self) -> f64 {
        self.objectness * self.class_conf.iter().copied().fold(0.0, f64::max)
    }

    pub fn class_score(&self, class: usize) -> f64 {
        self.objectness * self.class_conf.get(class).copied().unwrap_or(0.0)
    }

    /// Classes with nonzero confidence, in index order.
    pub fn active_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_conf
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(|(i, _)| i)
    }
}

pub fn iou(a: &BBoxXyxy, b: &BBoxXyxy) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            iou_threshold: DEFAULT_NMS_IOU,
        }
    }
}

impl NmsConfig {
    pub fn new(conf_threshold: f64, iou_threshold: f64) -> Result<Self> {
        check_unit("confidence threshold", conf_threshold)?;
        check_unit("NMS IoU threshold", iou_threshold)?;
        Ok(Self {
            conf_threshold,
            iou_threshold,
        })
    }
}

/// Whole-box greedy NMS over multi-label boxes.
///
/// Boxes are ranked by `objectness * max class confidence` (ties keep the
/// lower input index); anything under the confidence threshold is dropped
/// before suppression. Survivors keep only the classes whose
/// `objectness * confidence` clears the threshold. Output is in rank order.
pub fn nms_multilabel(boxes: &[ScoredBox], cfg: NmsConfig) -> Vec<ScoredBox> {
    let scores: Vec<f64> = boxes.iter().map(ScoredBox::score).collect();
    let mut order: Vec<usize> = (0..boxes.len())
        .filter(|&i| scores[i] >= cfg.conf_threshold)
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k].bbox, &boxes[i].bbox) <= cfg.iou_threshold)
        {
            kept.push(i);
        }
    }

    kept.into_iter()
        .map(|i| {
            let b = &boxes[i];
            let class_conf = b
                .class_conf
                .iter()
                .map(|&c| {
                    if b.objectness * c >= cfg.conf_threshold {
                        c
                    } else {
                        0.0
                    }
                })
                .collect();
            ScoredBox {
                bbox: b.bbox,
                objectness: b.objectness,
                class_conf,
            }
        })
        .collect()
}
