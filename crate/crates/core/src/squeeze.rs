//! Label squeeze (merging same-box single-label rows into multi-hot rows) and
//! the multi-label detector loss terms.

use serde::{Deserialize, Serialize};

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::model::{check_schema, BBoxXywh, SCHEMA_VERSION};
use crate::taxonomy::LesionTaxonomy;

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleLabelRow {
    pub class: usize,
    pub bbox: BBoxXywh,
}

/// A box with a multi-hot class vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelBox {
    pub classes: Vec<bool>,
    pub bbox: BBoxXywh,
}

impl MultiLabelBox {
    pub fn popcount(&self) -> usize {
        self.classes.iter().filter(|&&c| c).count()
    }

    pub fn class_vector(&self) -> Vec<f64> {
        self.classes
            .iter()
            .map(|&c| if c { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| i)
    }
}

fn same_box(a: &BBoxXywh, b: &BBoxXywh, tolerance: f64) -> bool {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .all(|(p, q)| (p - q).abs() <= tolerance)
}

/// Groups rows whose boxes match (exactly, or per coordinate within
/// `tolerance`) into one multi-hot row per group. A row joins the first
/// group whose representative box it matches; output follows first
/// appearance.
pub fn label_squeeze(
    rows: &[SingleLabelRow],
    num_classes: usize,
    tolerance: f64,
) -> Result<Vec<MultiLabelBox>> {
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::OutOfRange {
            what: "squeeze tolerance",
            value: tolerance,
            expected: ">= 0",
        });
    }
    let mut out: Vec<MultiLabelBox> = Vec::new();
    // Exact matching gets a hash index; `+ 0.0` folds -0.0 into 0.0.
    let mut exact: HashMap<[u64; 4], usize> = HashMap::new();
    for row in rows {
        if row.class >= num_classes {
            return Err(Error::UnknownClassIndex(row.class));
        }
        let found = if tolerance == 0.0 {
            let key = row.bbox.to_array().map(|v| (v + 0.0).to_bits());
            match exact.get(&key) {
                Some(&i) => Some(i),
                None => {
                    exact.insert(key, out.len());
                    None
                }
            }
        } else {
            out.iter()
                .position(|m| same_box(&m.bbox, &row.bbox, tolerance))
        };
        match found {
            Some(i) => out[i].classes[row.class] = true,
            None => {
                let mut classes = vec![false; num_classes];
                classes[row.class] = true;
                out.push(MultiLabelBox {
                    classes,
                    bbox: row.bbox,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleLabelBox {
    pub class: String,
    /// `(x, y, w, h)`
    pub bbox: [f64; 4],
}

/// One line of a single-label annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleLabelRecord {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub image_id: String,
    pub boxes: Vec<SingleLabelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiLabelBoxRecord {
    pub classes: Vec<String>,
    pub bbox: [f64; 4],
}

/// One line of a squeezed (multi-label) annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiLabelRecord {
    pub schema_version: u32,
    pub image_id: String,
    pub boxes: Vec<MultiLabelBoxRecord>,
}

pub fn squeeze_record(
    rec: &SingleLabelRecord,
    taxonomy: &LesionTaxonomy,
    tolerance: f64,
) -> Result<(Vec<MultiLabelBox>, MultiLabelRecord)> {
    check_schema(rec.schema_version)?;
    let rows = rec
        .boxes
        .iter()
        .map(|b| {
            Ok(SingleLabelRow {
                class: taxonomy.resolve(&b.class)?,
                bbox: BBoxXywh::from_array(b.bbox)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let squeezed = label_squeeze(&rows, taxonomy.len(), tolerance)?;
    let out = MultiLabelRecord {
        schema_version: SCHEMA_VERSION,
        image_id: rec.image_id.clone(),
        boxes: squeezed
            .iter()
            .map(|m| MultiLabelBoxRecord {
                classes: m.active().map(|c| taxonomy.name(c).to_string()).collect(),
                bbox: m.bbox.to_array(),
            })
            .collect(),
    };
    Ok((squeezed, out))
}

/// Row and box counts plus a histogram of labels per squeezed box.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SqueezeSummary {
    pub images: usize,
    pub rows: usize,
    pub boxes: usize,
    pub labels_per_box: BTreeMap<usize, usize>,
}

impl SqueezeSummary {
    pub fn add(&mut self, rows: usize, boxes: &[MultiLabelBox]) {
        self.images += 1;
        self.rows += rows;
        self.boxes += boxes.len();
        for b in boxes {
            *self.labels_per_box.entry(b.popcount()).or_default() += 1;
        }
    }
}

fn check_rows(what: &'static str, targets: &[Vec<f64>], preds: &[Vec<f64>]) -> Result<()> {
    if targets.len() != preds.len() {
        return Err(Error::LengthMismatch {
            what,
            left: targets.len(),
            right: preds.len(),
        });
    }
    for (t, p) in targets.iter().zip(preds) {
        if t.len() != p.len() {
            return Err(Error::LengthMismatch {
                what: "class vector",
                left: t.len(),
                right: p.len(),
            });
        }
    }
    Ok(())
}

fn check_prob(what: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what,
            value: v,
            expected: "[0, 1]",
        })
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce(target: f64, pred: f64) -> f64 {
    let p = clamp_prob(pred);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Summed binary cross-entropy over every box and class.
pub fn classification_loss(targets: &[Vec<f64>], preds: &[Vec<f64>]) -> Result<f64> {
    check_rows("boxes", targets, preds)?;
    let mut sum = 0.0;
    for (t, p) in targets.iter().zip(preds) {
        for (&tj, &pj) in t.iter().zip(p) {
            check_prob("class target", tj)?;
            check_prob("class prediction", pj)?;
            sum += bce(tj, pj);
        }
    }
    Ok(sum)
}

/// d L_cls / d prediction, evaluated at the clamped prediction.
pub fn classification_loss_gradient(
    targets: &[Vec<f64>],
    preds: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    check_rows("boxes", targets, preds)?;
    Ok(targets
        .iter()
        .zip(preds)
        .map(|(t, p)| {
            t.iter()
                .zip(p)
                .map(|(&c, &q)| {
                    let q = clamp_prob(q);
                    -(c / q - (1.0 - c) / (1.0 - q))
                })
                .collect()
        })
        .collect())
}

pub fn objectness_loss(targets: &[f64], scores: &[f64]) -> Result<f64> {
    if targets.len() != scores.len() {
        return Err(Error::LengthMismatch {
            what: "objectness",
            left: targets.len(),
            right: scores.len(),
        });
    }
    let mut sum = 0.0;
    for (&t, &s) in targets.iter().zip(scores) {
        check_prob("presence target", t)?;
        check_prob("presence score", s)?;
        sum += bce(t, s);
    }
    Ok(sum)
}

/// Mean over boxes of the mean squared error of the four `(x, y, w, h)`
/// coordinates. Zero for empty input.
pub fn box_loss(targets: &[BBoxXywh], preds: &[BBoxXywh]) -> Result<f64> {
    if targets.len() != preds.len() {
        return Err(Error::LengthMismatch {
            what: "boxes",
            left: targets.len(),
            right: preds.len(),
        });
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = targets
        .iter()
        .zip(preds)
        .map(|(t, p)| {
            t.to_array()
                .iter()
                .zip(p.to_array())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / 4.0
        })
        .sum();
    Ok(sum / targets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub obj: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 0.5,
            obj: 1.0,
            bbox: 0.05,
        }
    }
}

impl LossWeights {
    pub fn new(cls: f64, obj: f64, bbox: f64) -> Result<Self> {
        let w = Self { cls, obj, bbox };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.cls, self.obj, self.bbox] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::OutOfRange {
                    what: "loss weight",
                    value: v,
                    expected: ">= 0",
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub obj: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub total: f64,
}

pub fn total_loss(cls: f64, obj: f64, bbox: f64, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    for v in [cls, obj, bbox] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::OutOfRange {
                what: "loss component",
                value: v,
                expected: ">= 0",
            });
        }
    }
    Ok(LossBreakdown {
        cls,
        obj,
        bbox,
        total: weights.cls * cls + weights.obj * obj + weights.bbox * bbox,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBoxXywh {
        BBoxXywh::new(x, y, w, h).unwrap()
    }

    #[test]
    fn squeeze_example() {
        let b1 = b(10.0, 10.0, 4.0, 4.0);
        let b2 = b(30.0, 30.0, 4.0, 4.0);
        let rows = [
            SingleLabelRow { class: 3, bbox: b1 },
            SingleLabelRow { class: 7, bbox: b1 },
            SingleLabelRow { class: 3, bbox: b2 },
        ];
        let out = label_squeeze(&rows, 8, 0.0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].active().collect::<Vec<_>>(), [3, 7]);
        assert_eq!(out[0].bbox, b1);
        assert_eq!(out[1].active().collect::<Vec<_>>(), [3]);
        assert!(label_squeeze(&[], 8, 0.0).unwrap().is_empty());
    }

    #[test]
    fn squeeze_tolerance() {
        let rows = [
            SingleLabelRow { class: 0, bbox: b(10.0, 10.0, 4.0, 4.0) },
            SingleLabelRow { class: 1, bbox: b(10.0005, 10.0, 4.0, 4.0) },
        ];
        assert_eq!(label_squeeze(&rows, 2, 0.0).unwrap().len(), 2);
        assert_eq!(label_squeeze(&rows, 2, 1e-3).unwrap().len(), 1);
        assert!(label_squeeze(&rows, 1, 0.0).is_err());
    }

    #[test]
    fn squeeze_named_record() {
        let t = LesionTaxonomy::default_chest();
        let rec = SingleLabelRecord {
            schema_version: Some(1),
            image_id: "a".into(),
            boxes: vec![
                SingleLabelBox { class: "atelectasis".into(), bbox: [1.0, 1.0, 5.0, 5.0] },
                SingleLabelBox { class: "lung opacity".into(), bbox: [1.0, 1.0, 5.0, 5.0] },
                SingleLabelBox { class: "pneumothorax".into(), bbox: [9.0, 9.0, 5.0, 5.0] },
            ],
        };
        let (boxes, out) = squeeze_record(&rec, &t, 0.0).unwrap();
        assert_eq!(out.boxes.len(), 2);
        assert_eq!(out.boxes[1].classes, ["pneumothorax"]);
        let mut s = SqueezeSummary::default();
        s.add(rec.boxes.len(), &boxes);
        assert_eq!((s.rows, s.boxes), (3, 2));
        assert_eq!(s.labels_per_box, BTreeMap::from([(1, 1), (2, 1)]));
    }

    #[test]
    fn bce_examples() {
        let l = classification_loss(&[vec![1.0]], &[vec![1.0 - PROB_EPS]]).unwrap();
        assert!(l < 1e-6);
        let l = classification_loss(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]]).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
        let l = objectness_loss(&[0.0], &[0.5]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(objectness_loss(&[1.0], &[1.0 - PROB_EPS]).unwrap() < 1e-6);
        // exact 0/1 predictions are clamped rather than producing infinities
        assert!(classification_loss(&[vec![1.0]], &[vec![0.0]]).unwrap().is_finite());
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(matches!(
            classification_loss(&[vec![1.0]], &[]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(classification_loss(&[vec![1.0]], &[vec![0.5, 0.5]]).is_err());
        assert!(objectness_loss(&[1.0, 0.0], &[0.5]).is_err());
        assert!(box_loss(&[b(1.0, 1.0, 1.0, 1.0)], &[]).is_err());
    }

    #[test]
    fn box_loss_examples() {
        let t = [b(0.0, 0.0, 1.0, 1.0)];
        assert_eq!(box_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(box_loss(&t, &[b(1.0, 1.0, 1.0, 1.0)]).unwrap(), 0.5);
        assert_eq!(box_loss(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let r = total_loss(2.0, 1.0, 10.0, LossWeights::default()).unwrap();
        assert!((r.total - 2.5).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, LossWeights::default()).unwrap().total, 0.0);
        let r = total_loss(3.7, 1.0, 9.0, LossWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(r.total, 3.7);
        assert!(LossWeights::new(-0.1, 1.0, 1.0).is_err());
        assert!(total_loss(-1.0, 0.0, 0.0, LossWeights::default()).is_err());
    }
}
