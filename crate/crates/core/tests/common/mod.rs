//! Independent reference implementations used by the integration tests.
//!
//! Each oracle recomputes a result from its definition without calling the
//! library routine it checks. Library types are only used as containers.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use parp_core::geometry::ScoredBox;
use parp_core::metrics::detection::{DetectionEvalImage, GtBox};
use parp_core::model::{BBoxXywh, BBoxXyxy};
use parp_core::squeeze::SingleLabelRow;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}

// ---------------------------------------------------------------- losses

const EPS: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// One BCE term, written case by case for hard targets.
pub fn bce_term(t: f64, p: f64) -> f64 {
    let q = clamp(p);
    if t == 1.0 {
        -q.ln()
    } else if t == 0.0 {
        -(1.0 - q).ln()
    } else {
        -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
    }
}

pub fn cls_loss_oracle(targets: &[Vec<f64>], preds: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..targets.len() {
        for j in 0..targets[i].len() {
            total += bce_term(targets[i][j], preds[i][j]);
        }
    }
    total
}

pub fn obj_loss_oracle(targets: &[f64], scores: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..targets.len() {
        total += bce_term(targets[i], scores[i]);
    }
    total
}

pub fn box_loss_oracle(targets: &[BBoxXywh], preds: &[BBoxXywh]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut sq = 0.0;
    for i in 0..targets.len() {
        let (t, p) = (targets[i], preds[i]);
        for (a, b) in [(t.x(), p.x()), (t.y(), p.y()), (t.w(), p.w()), (t.h(), p.h())] {
            sq += (a - b) * (a - b);
        }
    }
    sq / (4 * targets.len()) as f64
}

// --------------------------------------------------------------- squeeze

/// Sort-then-group reference: rows sharing exact coordinates form a group,
/// groups ordered by their first row.
pub fn squeeze_oracle(rows: &[SingleLabelRow], num_classes: usize) -> Vec<(Vec<bool>, [f64; 4])> {
    let key = |r: &SingleLabelRow| r.bbox.to_array();
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ka, kb) = (key(&rows[a]), key(&rows[b]));
        ka.iter()
            .zip(kb.iter())
            .map(|(x, y)| x.partial_cmp(y).unwrap())
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut groups: Vec<(usize, Vec<bool>, [f64; 4])> = Vec::new();
    for &i in &idx {
        let k = key(&rows[i]);
        match groups.last_mut() {
            Some(g) if g.2 == k => g.1[rows[i].class] = true,
            _ => {
                let mut c = vec![false; num_classes];
                c[rows[i].class] = true;
                groups.push((i, c, k));
            }
        }
    }
    groups.sort_by_key(|g| g.0);
    groups.into_iter().map(|g| (g.1, g.2)).collect()
}

// -------------------------------------------------------------- geometry

pub fn iou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBoxXyxy {
    let x1 = rng.gen_range(0.0..extent);
    let y1 = rng.gen_range(0.0..extent);
    let w = rng.gen_range(0.5..extent / 2.0);
    let h = rng.gen_range(0.5..extent / 2.0);
    BBoxXyxy::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Box with integer corners on a small grid, so overlaps and IoU ties are
/// common.
pub fn grid_box(rng: &mut ChaCha8Rng, grid: u32) -> BBoxXyxy {
    let x1 = rng.gen_range(0..grid) as f64;
    let y1 = rng.gen_range(0..grid) as f64;
    let w = rng.gen_range(1..=grid / 2) as f64;
    let h = rng.gen_range(1..=grid / 2) as f64;
    BBoxXyxy::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn box_score(b: &ScoredBox) -> f64 {
    let mut m = 0.0f64;
    for &c in &b.class_conf {
        if c > m {
            m = c;
        }
    }
    b.objectness * m
}

/// Exhaustive reference for greedy NMS. The greedy result is the unique set
/// `K` of candidates such that a candidate belongs to `K` exactly when no
/// higher-ranked member of `K` overlaps it by more than the IoU threshold.
/// Every subset is tried and the fixed point is returned in rank order, with
/// class confidences thresholded.
pub fn nms_oracle(boxes: &[ScoredBox], conf: f64, iou_thr: f64) -> Vec<ScoredBox> {
    let scores: Vec<f64> = boxes.iter().map(box_score).collect();
    let mut cand: Vec<usize> = (0..boxes.len()).filter(|&i| scores[i] >= conf).collect();
    cand.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let n = cand.len();
    assert!(n <= 12, "exhaustive oracle is for small inputs");
    let overlaps = |a: usize, b: usize| iou_oracle(boxes[a].bbox.to_array(), boxes[b].bbox.to_array()) > iou_thr;

    let mut fixed = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |r: usize| mask & (1 << r) != 0;
        let consistent = (0..n).all(|r| {
            let blocked = (0..r).any(|q| inside(q) && overlaps(cand[q], cand[r]));
            inside(r) == !blocked
        });
        if consistent {
            fixed.push(mask);
        }
    }
    assert_eq!(fixed.len(), 1, "greedy fixed point must be unique");
    let mask = fixed[0];
    (0..n)
        .filter(|&r| mask & (1 << r) != 0)
        .map(|r| {
            let b = &boxes[cand[r]];
            ScoredBox {
                bbox: b.bbox,
                objectness: b.objectness,
                class_conf: b
                    .class_conf
                    .iter()
                    .map(|&c| if b.objectness * c >= conf { c } else { 0.0 })
                    .collect(),
            }
        })
        .collect()
}

// --------------------------------------------------------------- prompts

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Kind {
    Root,
    Second,
    Third(&'static str),
    Independent,
}

/// The lesion hierarchy written out by hand.
pub const HIERARCHY: [(&str, Kind); 21] = [
    ("lung opacity", Kind::Root),
    ("airspace opacity", Kind::Second),
    ("consolidation", Kind::Second),
    ("atelectasis", Kind::Second),
    ("linear/patchy atelectasis", Kind::Third("atelectasis")),
    ("lobar/segmental collapse", Kind::Third("atelectasis")),
    ("pulmonary edema/hazy opacity", Kind::Second),
    ("vascular congestion", Kind::Second),
    ("vascular redistribution", Kind::Third("vascular congestion")),
    ("pleural effusion", Kind::Second),
    ("costophrenic angle blunting", Kind::Third("pleural effusion")),
    ("pleural/parenchymal scarring", Kind::Second),
    ("enlarged cardiac silhouette", Kind::Independent),
    ("mediastinal widening", Kind::Independent),
    ("enlarged hilum", Kind::Independent),
    ("tortuous aorta", Kind::Independent),
    ("vascular calcification", Kind::Independent),
    ("pneumothorax", Kind::Independent),
    ("lung lesion", Kind::Second),
    ("mass/nodule", Kind::Third("lung lesion")),
    ("hyperaeration", Kind::Independent),
];

pub fn kind_of(name: &str) -> Kind {
    HIERARCHY
        .iter()
        .find(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("unknown class {name}"))
        .1
}

pub fn token_of(name: &str) -> String {
    name.to_lowercase().replace([' ', '/'], "_")
}

/// Rule table for one region's lesion set.
///
/// * nothing: `[NEG]`
/// * a third-level class speaks for its second-level parent
/// * a second-level class speaks for itself and silences the root
/// * the root alone (no opacity-branch member) is a candidate itself
/// * independent classes are always candidates
/// * several candidates: lowest frequency, then first in `order`
pub fn token_oracle(lesions: &BTreeSet<&str>, freq: &dyn Fn(&str) -> f64, order: &dyn Fn(&str) -> usize) -> String {
    if lesions.is_empty() {
        return "[NEG]".into();
    }
    let mut candidates: BTreeSet<&str> = BTreeSet::new();
    let mut branch_member = false;
    for &l in lesions {
        match kind_of(l) {
            Kind::Root => {}
            Kind::Second => {
                branch_member = true;
                candidates.insert(l);
            }
            Kind::Third(parent) => {
                branch_member = true;
                candidates.insert(parent);
            }
            Kind::Independent => {
                candidates.insert(l);
            }
        }
    }
    if !branch_member && lesions.contains("lung opacity") {
        candidates.insert("lung opacity");
    }
    let mut best: Option<&str> = None;
    for c in candidates {
        best = match best {
            None => Some(c),
            Some(b) => {
                let (fc, fb) = (freq(c), freq(b));
                if fc < fb || (fc == fb && order(c) < order(b)) {
                    Some(c)
                } else {
                    Some(b)
                }
            }
        };
    }
    token_of(best.unwrap())
}

// --------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: u64, fp: u64, fn_: u64) -> Prf {
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

fn tally(cells: impl Iterator<Item = (u8, u8)>) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (c, r) in cells {
        if c == 1 && r == 1 {
            tp += 1;
        }
        if c == 1 && r == 0 {
            fp += 1;
        }
        if c == 0 && r == 1 {
            fn_ += 1;
        }
    }
    (tp, fp, fn_)
}

fn mean(v: &[Prf]) -> Prf {
    let n = v.len() as f64;
    Prf {
        precision: v.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: v.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: v.iter().map(|p| p.f1).sum::<f64>() / n,
    }
}

/// (micro, macro over columns, mean over rows), zero denominators giving 0.
pub fn ce_oracle(cand: &[Vec<u8>], reference: &[Vec<u8>]) -> (Prf, Prf, Prf) {
    let width = reference.first().map_or(0, Vec::len);
    let all = tally((0..cand.len()).flat_map(|i| (0..width).map(move |j| (cand[i][j], reference[i][j]))));
    let micro = prf(all.0, all.1, all.2);
    let cols: Vec<Prf> = (0..width)
        .map(|j| {
            let t = tally((0..cand.len()).map(|i| (cand[i][j], reference[i][j])));
            prf(t.0, t.1, t.2)
        })
        .collect();
    let rows: Vec<Prf> = (0..cand.len())
        .map(|i| {
            let t = tally((0..width).map(|j| (cand[i][j], reference[i][j])));
            prf(t.0, t.1, t.2)
        })
        .collect();
    (micro, mean(&cols), mean(&rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassOracle {
    pub class: usize,
    pub gt: usize,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Greedy matching, redone: per image, predictions with a positive score
/// for the class in descending score (lower index first), each claiming the
/// free ground-truth box of highest IoU (lower index on ties) when that IoU
/// reaches the threshold. Returns `(score, is_tp)` pairs and the GT count.
pub fn match_oracle(images: &[DetectionEvalImage], class: usize, thr: f64) -> (Vec<(f64, bool)>, usize) {
    let mut out = Vec::new();
    let mut total_gt = 0;
    for im in images {
        let gts: Vec<&GtBox> = im.gt.iter().filter(|g| g.classes.contains(&class)).collect();
        total_gt += gts.len();
        let mut preds: Vec<(usize, f64)> = Vec::new();
        for (i, p) in im.predictions.iter().enumerate() {
            let s = p.objectness * p.class_conf[class];
            if s > 0.0 {
                preds.push((i, s));
            }
        }
        preds.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut taken = vec![false; gts.len()];
        for (i, s) in preds {
            let mut best: Option<usize> = None;
            let mut best_iou = -1.0;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou_oracle(im.predictions[i].bbox.to_array(), gt.bbox.to_array());
                if !taken[g] && v >= thr && v > best_iou {
                    best = Some(g);
                    best_iou = v;
                }
            }
            if let Some(g) = best {
                taken[g] = true;
            }
            out.push((s, best.is_some()));
        }
    }
    (out, total_gt)
}

/// Area under the interpolated PR curve, from first principles: for each
/// distinct score `s`, precision and recall of the predictions scoring at
/// least `s`; AP sums, over increasing recall levels, the recall step times
/// the best precision reachable at that recall or beyond.
pub fn ap_oracle(preds: &[(f64, bool)], gt: usize) -> f64 {
    if gt == 0 {
        return 0.0;
    }
    let mut levels: Vec<f64> = preds.iter().map(|p| p.0).collect();
    levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    levels.dedup();
    let curve: Vec<(f64, f64)> = levels
        .iter()
        .map(|&s| {
            let above: Vec<&(f64, bool)> = preds.iter().filter(|p| p.0 >= s).collect();
            let tp = above.iter().filter(|p| p.1).count() as f64;
            (tp / gt as f64, tp / above.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = curve.iter().map(|c| c.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = curve
            .iter()
            .filter(|c| c.0 >= r)
            .map(|c| c.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Per-class AP and thresholded P/R for classes with ground truth.
pub fn detection_oracle(images: &[DetectionEvalImage], num_classes: usize, thr: f64, conf: f64) -> Vec<ClassOracle> {
    let mut out = Vec::new();
    for c in 0..num_classes {
        let (preds, gt) = match_oracle(images, c, thr);
        if gt == 0 {
            continue;
        }
        let kept: Vec<&(f64, bool)> = preds.iter().filter(|p| p.0 >= conf).collect();
        let tp = kept.iter().filter(|p| p.1).count() as f64;
        out.push(ClassOracle {
            class: c,
            gt,
            ap: ap_oracle(&preds, gt),
            precision: if kept.is_empty() { 0.0 } else { tp / kept.len() as f64 },
            recall: tp / gt as f64,
        });
    }
    out
}

/// Small random detection problem: up to 5 images and 4 classes, boxes on a
/// coarse grid, predictions partly copied from ground truth.
pub fn random_detection_case(rng: &mut ChaCha8Rng) -> (Vec<DetectionEvalImage>, usize) {
    let classes = rng.gen_range(1..=4);
    let images = rng.gen_range(1..=5);
    let levels = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let out = (0..images)
        .map(|i| {
            let gt: Vec<GtBox> = (0..rng.gen_range(0..=3))
                .map(|_| {
                    let mut set = BTreeSet::new();
                    set.insert(rng.gen_range(0..classes));
                    if rng.gen_bool(0.3) {
                        set.insert(rng.gen_range(0..classes));
                    }
                    GtBox {
                        bbox: grid_box(rng, 8),
                        classes: set,
                    }
                })
                .collect();
            let predictions: Vec<ScoredBox> = (0..rng.gen_range(0..=5))
                .map(|_| {
                    let bbox = if !gt.is_empty() && rng.gen_bool(0.6) {
                        let g = gt[rng.gen_range(0..gt.len())].bbox.to_array();
                        let d = rng.gen_range(0..=1) as f64;
                        BBoxXyxy::new(g[0] + d, g[1], g[2] + d, g[3]).unwrap()
                    } else {
                        grid_box(rng, 8)
                    };
                    let conf = (0..classes).map(|_| levels[rng.gen_range(0..levels.len())]).collect();
                    let obj = [0.5, 0.8, 1.0][rng.gen_range(0..3)];
                    ScoredBox::new(bbox, obj, conf).unwrap()
                })
                .collect();
            DetectionEvalImage {
                image_id: format!("img{i}"),
                gt,
                predictions,
            }
        })
        .collect();
    (out, classes)
}

/// Class name → frequency and index lookups for the token oracle.
pub fn name_tables(tax: &parp_core::taxonomy::LesionTaxonomy) -> (BTreeMap<String, f64>, BTreeMap<String, usize>) {
    let freq = (0..tax.len()).map(|c| (tax.name(c).to_string(), tax.frequency(c))).collect();
    let order = (0..tax.len()).map(|c| (tax.name(c).to_string(), c)).collect();
    (freq, order)
}
