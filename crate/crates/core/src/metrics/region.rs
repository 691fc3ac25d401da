//! Anatomical region detector scoring: micro-averaged IoU per region and
//! detections per image.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{DetectionSet, SceneGraph};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionIou {
    pub region: usize,
    pub name: String,
    pub images: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionEvalResult {
    pub per_region: Vec<RegionIou>,
    /// Unweighted mean over regions present in the ground truth.
    pub average_iou: f64,
    pub detected_per_image: f64,
    pub warnings: Vec<String>,
}

/// Pairs ground truth and predictions by image id. A region missing from
/// the predictions contributes no intersection and its full ground-truth
/// area to the union.
pub fn region_eval(gt: &[SceneGraph], pred: &[DetectionSet], region_names: &[String]) -> Result<RegionEvalResult> {
    if gt.is_empty() {
        return Err(Error::EmptyInput("region ground truth"));
    }
    let n = region_names.len();
    let mut inter = vec![0.0; n];
    let mut union = vec![0.0; n];
    let mut images = vec![0usize; n];
    let mut detected = 0usize;
    let mut warnings = Vec::new();
    for sg in gt {
        let Some(p) = pred.iter().find(|p| p.image_id == sg.image_id) else {
            warnings.push(format!("no region detections for image {:?}", sg.image_id));
            for e in &sg.regions {
                images[e.region] += 1;
                union[e.region] += e.bbox.area();
            }
            continue;
        };
        detected += p.region_detections.len();
        for e in &sg.regions {
            images[e.region] += 1;
            match p.region_detections.iter().find(|d| d.region == e.region) {
                Some(d) => {
                    let i = e.bbox.intersection_area(&d.bbox);
                    inter[e.region] += i;
                    union[e.region] += e.bbox.area() + d.bbox.area() - i;
                }
                None => union[e.region] += e.bbox.area(),
            }
        }
    }
    let per_region: Vec<RegionIou> = (0..n)
        .filter(|&r| images[r] > 0)
        .map(|r| RegionIou {
            region: r,
            name: region_names[r].clone(),
            images: images[r],
            iou: if union[r] > 0.0 { inter[r] / union[r] } else { 0.0 },
        })
        .collect();
    let average_iou = if per_region.is_empty() {
        0.0
    } else {
        per_region.iter().map(|r| r.iou).sum::<f64>() / per_region.len() as f64
    };
    Ok(RegionEvalResult {
        average_iou,
        detected_per_image: detected as f64 / gt.len() as f64,
        per_region,
        warnings,
    })
}
