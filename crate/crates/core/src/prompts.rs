//! Pathology-aware regional prompts: one lesion token (or `[NEG]`) per
//! anatomical region, built from scene graphs during training and from
//! detector output at inference.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};
use crate::geometry::{iou, nms_multilabel, NmsConfig, ScoredBox};
use crate::model::{ClassSet, DetectionSet, RegionDetection, RegionVocabulary, SceneGraph, REGION_COUNT};
use crate::taxonomy::{ClassLevel, LesionTaxonomy};

pub const NEG_TOKEN: &str = "[NEG]";
pub const SEPARATOR: &str = "<SEP>";
pub const DEFAULT_ASSIGN_IOU: f64 = 0.4;
pub const TEXT_PROMPT_HEADER: &str =
    "Please generate a report for this chest x-ray image. Here are some initial findings:";

/// Lowercase, with spaces and slashes turned into underscores.
pub fn normalize_token(name: &str) -> String {
    name.to_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '/' { '_' } else { c })
        .collect()
}

/// Picks the single token describing a region's lesion set.
///
/// Second-level classes stand for themselves, third-level classes for
/// their second-level parent, and the root only counts when no other
/// opacity-branch class is present. Among the remaining candidates (plus
/// any independent classes) the least frequent wins, ties going to the
/// lower class index. `None` means `[NEG]`.
pub fn select_region_token(taxonomy: &LesionTaxonomy, lesions: &ClassSet) -> Result<Option<usize>> {
    if let Some(&bad) = lesions.iter().find(|&&c| c >= taxonomy.len()) {
        return Err(Error::UnknownClassIndex(bad));
    }
    let mut opacity = BTreeSet::new();
    let mut candidates = BTreeSet::new();
    for &c in lesions {
        match taxonomy.level(c) {
            ClassLevel::Second => {
                opacity.insert(c);
            }
            ClassLevel::Third => {
                opacity.insert(taxonomy.parent(c).expect("third-level class has a parent"));
            }
            ClassLevel::Independent => {
                candidates.insert(c);
            }
            ClassLevel::Root => {}
        }
    }
    if opacity.is_empty() && lesions.contains(&taxonomy.root()) {
        candidates.insert(taxonomy.root());
    }
    candidates.extend(opacity);
    Ok(candidates.into_iter().min_by(|&a, &b| {
        taxonomy
            .frequency(a)
            .total_cmp(&taxonomy.frequency(b))
            .then(a.cmp(&b))
    }))
}

/// A 29-slot prompt; slot `k` belongs to region `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionalPrompt {
    slots: Vec<Option<usize>>,
}

impl Default for RegionalPrompt {
    fn default() -> Self {
        Self::all_negative()
    }
}

impl RegionalPrompt {
    pub fn all_negative() -> Self {
        Self {
            slots: vec![None; REGION_COUNT],
        }
    }

    pub fn from_slots(slots: Vec<Option<usize>>) -> Result<Self> {
        if slots.len() != REGION_COUNT {
            return Err(Error::InvalidPrompt(format!(
                "expected {REGION_COUNT} slots, got {}",
                slots.len()
            )));
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[Option<usize>] {
        &self.slots
    }

    pub fn tokens(&self, taxonomy: &LesionTaxonomy) -> Vec<String> {
        self.slots
            .iter()
            .map(|s| match s {
                None => NEG_TOKEN.to_string(),
                Some(c) => normalize_token(taxonomy.name(*c)),
            })
            .collect()
    }

    pub fn render(&self, taxonomy: &LesionTaxonomy) -> String {
        self.tokens(taxonomy).join(" ")
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], taxonomy: &LesionTaxonomy) -> Result<Self> {
        if tokens.len() != REGION_COUNT {
            return Err(Error::InvalidPrompt(format!(
                "expected {REGION_COUNT} tokens, got {}",
                tokens.len()
            )));
        }
        let lookup: BTreeMap<String, usize> = (0..taxonomy.len())
            .map(|c| (normalize_token(taxonomy.name(c)), c))
            .collect();
        let slots = tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                if t == NEG_TOKEN {
                    Ok(None)
                } else {
                    lookup
                        .get(t)
                        .copied()
                        .map(Some)
                        .ok_or_else(|| Error::InvalidPrompt(format!("unknown token {t:?}")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { slots })
    }

    pub fn parse(rendered: &str, taxonomy: &LesionTaxonomy) -> Result<Self> {
        let tokens: Vec<&str> = rendered.split_whitespace().collect();
        Self::from_tokens(&tokens, taxonomy)
    }

    /// Number of slots that agree with `other`.
    pub fn agreement(&self, other: &RegionalPrompt) -> usize {
        self.slots
            .iter()
            .zip(&other.slots)
            .filter(|(a, b)| a == b)
            .count()
    }
}

pub fn build_training_prompt(sg: &SceneGraph, taxonomy: &LesionTaxonomy) -> Result<RegionalPrompt> {
    let mut prompt = RegionalPrompt::all_negative();
    for entry in &sg.regions {
        prompt.slots[entry.region] = select_region_token(taxonomy, &entry.lesions)?;
    }
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assigned {
    /// Index into the lesion box list the assignment was made from.
    pub lesion: usize,
    pub iou: f64,
}

/// Per region, the lesion box chosen for it, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAssignment {
    pub slots: Vec<Option<Assigned>>,
}

impl RegionAssignment {
    pub fn assigned_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Gives every detected region the lesion box with the highest IoU against
/// it (lower index on ties), provided that IoU reaches `iou_threshold`. One
/// lesion box may serve several regions.
pub fn assign_lesions_to_regions(
    regions: &[RegionDetection],
    lesions: &[ScoredBox],
    iou_threshold: f64,
) -> Result<RegionAssignment> {
    check_unit("assignment IoU threshold", iou_threshold)?;
    let mut slots = vec![None; REGION_COUNT];
    for r in regions {
        if r.region >= REGION_COUNT {
            return Err(Error::UnknownRegion(format!("index {}", r.region)));
        }
        let mut best: Option<Assigned> = None;
        for (i, l) in lesions.iter().enumerate() {
            let v = iou(&r.bbox, &l.bbox);
            if best.is_none_or(|b| v > b.iou) {
                best = Some(Assigned { lesion: i, iou: v });
            }
        }
        slots[r.region] = best.filter(|b| b.iou >= iou_threshold);
    }
    Ok(RegionAssignment { slots })
}

/// Applies the token rule to the active classes (nonzero confidence) of
/// each region's assigned box; unassigned regions get `[NEG]`.
pub fn build_inference_prompt(
    assignment: &RegionAssignment,
    lesions: &[ScoredBox],
    taxonomy: &LesionTaxonomy,
) -> Result<RegionalPrompt> {
    let mut prompt = RegionalPrompt::all_negative();
    for (slot, a) in prompt.slots.iter_mut().zip(&assignment.slots) {
        if let Some(a) = a {
            let active: ClassSet = lesions[a.lesion].active_classes().collect();
            *slot = select_region_token(taxonomy, &active)?;
        }
    }
    Ok(prompt)
}

/// Result of running NMS, assignment and token selection on one image.
#[derive(Debug, Clone)]
pub struct InferredPrompt {
    pub prompt: RegionalPrompt,
    pub assignment: RegionAssignment,
    pub kept: Vec<ScoredBox>,
}

pub fn infer_prompt(
    detections: &DetectionSet,
    nms: NmsConfig,
    assign_iou: f64,
    taxonomy: &LesionTaxonomy,
) -> Result<InferredPrompt> {
    let kept = nms_multilabel(&detections.lesion_detections, nms);
    let assignment = assign_lesions_to_regions(&detections.region_detections, &kept, assign_iou)?;
    let prompt = build_inference_prompt(&assignment, &kept, taxonomy)?;
    Ok(InferredPrompt {
        prompt,
        assignment,
        kept,
    })
}

fn escape_report(report: &str) -> String {
    report
        .replace('\\', "\\\\")
        .replace(SEPARATOR, "<\\SEP>")
}

fn unescape_report(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// `"<prompt> <SEP> <report>"`; occurrences of the separator inside the
/// report are escaped.
pub fn serialize_training_sample(
    prompt: &RegionalPrompt,
    report: &str,
    taxonomy: &LesionTaxonomy,
) -> String {
    format!(
        "{} {SEPARATOR} {}",
        prompt.render(taxonomy),
        escape_report(report)
    )
}

/// Prompt followed by the separator, with no report text.
pub fn serialize_inference_prompt(prompt: &RegionalPrompt, taxonomy: &LesionTaxonomy) -> String {
    format!("{} {SEPARATOR}", prompt.render(taxonomy))
}

pub fn parse_sample(text: &str, taxonomy: &LesionTaxonomy) -> Result<(RegionalPrompt, String)> {
    let marker = format!(" {SEPARATOR}");
    let pos = text
        .find(&marker)
        .ok_or_else(|| Error::InvalidPrompt("missing separator".into()))?;
    let prompt = RegionalPrompt::parse(&text[..pos], taxonomy)?;
    let rest = &text[pos + marker.len()..];
    let rest = rest.strip_prefix(' ').unwrap_or(rest);
    Ok((prompt, unescape_report(rest)))
}

/// Regions and their detected lesion classes, as fed to the text prompt.
pub fn assignment_findings(
    assignment: &RegionAssignment,
    lesions: &[ScoredBox],
) -> Vec<(usize, ClassSet)> {
    assignment
        .slots
        .iter()
        .enumerate()
        .filter_map(|(region, a)| {
            a.map(|a| (region, lesions[a.lesion].active_classes().collect::<ClassSet>()))
        })
        .filter(|(_, s)| !s.is_empty())
        .collect()
}

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Free-text variant of the prompt: a fixed header and one numbered line per
/// group of lesions that share the same set of regions.
pub fn build_text_prompt(
    findings: &[(usize, ClassSet)],
    vocab: &RegionVocabulary,
    taxonomy: &LesionTaxonomy,
) -> String {
    let mut regions_of: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (region, classes) in findings {
        for &c in classes {
            regions_of.entry(c).or_default().insert(*region);
        }
    }
    // lesion groups keyed by region set, ordered by their first lesion index
    let mut groups: Vec<(BTreeSet<usize>, Vec<usize>)> = Vec::new();
    for (lesion, regions) in regions_of {
        match groups.iter_mut().find(|(r, _)| *r == regions) {
            Some((_, ls)) => ls.push(lesion),
            None => groups.push((regions, vec![lesion])),
        }
    }
    let mut out = TEXT_PROMPT_HEADER.to_string();
    for (i, (regions, lesions)) in groups.iter().enumerate() {
        let lesion_names: Vec<&str> = lesions.iter().map(|&c| taxonomy.name(c)).collect();
        let region_names: Vec<&str> = regions.iter().map(|&r| vocab.name(r)).collect();
        out.push_str(&format!(
            "\n{}. {} may be present in the {}.",
            i + 1,
            join_names(&lesion_names),
            join_names(&region_names)
        ));
    }
    out
}

/// One line of a prompt file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub schema_version: u32,
    pub image_id: String,
    pub tokens: Vec<String>,
    pub rendered: String,
}

impl PromptRecord {
    pub fn new(image_id: &str, prompt: &RegionalPrompt, taxonomy: &LesionTaxonomy) -> Self {
        Self {
            schema_version: crate::model::SCHEMA_VERSION,
            image_id: image_id.to_string(),
            tokens: prompt.tokens(taxonomy),
            rendered: prompt.render(taxonomy),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBoxXyxy, RegionEntry};

    fn tax() -> LesionTaxonomy {
        LesionTaxonomy::default_chest()
    }

    fn set(t: &LesionTaxonomy, names: &[&str]) -> ClassSet {
        names.iter().map(|n| t.index_of(n).unwrap()).collect()
    }

    fn token(t: &LesionTaxonomy, names: &[&str]) -> String {
        match select_region_token(t, &set(t, names)).unwrap() {
            None => NEG_TOKEN.into(),
            Some(c) => normalize_token(t.name(c)),
        }
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBoxXyxy {
        BBoxXyxy::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn token_rule_examples() {
        let t = tax();
        assert_eq!(token(&t, &[]), NEG_TOKEN);
        assert_eq!(token(&t, &["pleural effusion"]), "pleural_effusion");
        assert_eq!(token(&t, &["lung opacity"]), "lung_opacity");
        assert_eq!(token(&t, &["lung opacity", "pleural effusion"]), "pleural_effusion");
        assert_eq!(
            token(&t, &["lung opacity", "atelectasis", "linear/patchy atelectasis"]),
            "atelectasis"
        );
        assert_eq!(token(&t, &["pneumothorax", "hyperaeration"]), "hyperaeration");
        assert_eq!(token(&t, &["mass/nodule"]), "lung_lesion");
        assert!(select_region_token(&t, &[42].into_iter().collect()).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize_token("pulmonary edema/hazy opacity"),
            "pulmonary_edema_hazy_opacity"
        );
        assert_eq!(normalize_token("Lung Opacity"), "lung_opacity");
    }

    #[test]
    fn training_prompt_one_hot() {
        let t = tax();
        let vocab = RegionVocabulary::chest_imagenome();
        let left = vocab.index_of("left lung").unwrap();
        let sg = SceneGraph {
            image_id: "a".into(),
            regions: vec![RegionEntry {
                region: left,
                bbox: bx(1.0, 1.0, 5.0, 5.0),
                lesions: set(&t, &["pleural effusion"]),
            }],
        };
        let p = build_training_prompt(&sg, &t).unwrap();
        let tokens = p.tokens(&t);
        assert_eq!(tokens.len(), REGION_COUNT);
        for (i, tok) in tokens.iter().enumerate() {
            if i == left {
                assert_eq!(tok, "pleural_effusion");
            } else {
                assert_eq!(tok, NEG_TOKEN);
            }
        }
        let empty = SceneGraph {
            image_id: "b".into(),
            regions: vec![],
        };
        assert_eq!(build_training_prompt(&empty, &t).unwrap(), RegionalPrompt::all_negative());
    }

    fn region(r: usize, b: BBoxXyxy) -> RegionDetection {
        RegionDetection {
            region: r,
            bbox: b,
            score: 1.0,
        }
    }

    fn lesion(b: BBoxXyxy, conf: Vec<f64>) -> ScoredBox {
        ScoredBox::new(b, 1.0, conf).unwrap()
    }

    #[test]
    fn assignment_examples() {
        let reg_a = region(0, bx(0.0, 0.0, 10.0, 10.0));
        // IoU 0.6 against A
        let reg_b = region(1, bx(0.0, 0.0, 10.0, 30.0));
        let l = lesion(bx(0.0, 0.0, 10.0, 6.0), vec![1.0]);
        assert!((iou(&reg_a.bbox, &l.bbox) - 0.6).abs() < 1e-12);
        assert!((iou(&reg_b.bbox, &l.bbox) - 0.2).abs() < 1e-12);
        let a = assign_lesions_to_regions(&[reg_a.clone(), reg_b], &[l], 0.4).unwrap();
        assert_eq!(a.slots[0].unwrap().lesion, 0);
        assert!(a.slots[1].is_none());

        let weak = lesion(bx(0.0, 0.0, 10.0, 5.0), vec![1.0]);
        let strong = lesion(bx(0.0, 0.0, 10.0, 7.0), vec![1.0]);
        let a = assign_lesions_to_regions(std::slice::from_ref(&reg_a), &[weak, strong], 0.4).unwrap();
        assert_eq!(a.slots[0].unwrap().lesion, 1);
        assert!((a.slots[0].unwrap().iou - 0.7).abs() < 1e-12);

        let a = assign_lesions_to_regions(&[reg_a], &[], 0.4).unwrap();
        assert_eq!(a.assigned_count(), 0);
    }

    #[test]
    fn one_lesion_box_serves_several_regions() {
        let l = lesion(bx(0.0, 0.0, 10.0, 10.0), vec![1.0]);
        let regs = [region(3, bx(0.0, 0.0, 10.0, 12.0)), region(7, bx(0.0, 0.0, 12.0, 10.0))];
        let a = assign_lesions_to_regions(&regs, &[l], 0.4).unwrap();
        assert_eq!(a.assigned_count(), 2);
    }

    #[test]
    fn inference_prompt_rule_two() {
        let t = tax();
        let mut conf = vec![0.0; t.len()];
        conf[t.index_of("lung opacity").unwrap()] = 0.9;
        conf[t.index_of("pleural effusion").unwrap()] = 0.8;
        let boxes = [lesion(bx(0.0, 0.0, 10.0, 10.0), conf)];
        let a = assign_lesions_to_regions(&[region(0, bx(0.0, 0.0, 10.0, 10.0))], &boxes, 0.4).unwrap();
        let p = build_inference_prompt(&a, &boxes, &t).unwrap();
        assert_eq!(p.tokens(&t)[0], "pleural_effusion");
        let empty = RegionAssignment {
            slots: vec![None; REGION_COUNT],
        };
        assert_eq!(build_inference_prompt(&empty, &[], &t).unwrap(), RegionalPrompt::all_negative());
    }

    #[test]
    fn serialization_contract() {
        let t = tax();
        let p = RegionalPrompt::all_negative();
        let s = serialize_training_sample(&p, "No acute process.", &t);
        let expected = format!("{} <SEP> No acute process.", vec![NEG_TOKEN; 29].join(" "));
        assert_eq!(s, expected);
        assert_eq!(parse_sample(&s, &t).unwrap(), (p.clone(), "No acute process.".to_string()));
        let inf = serialize_inference_prompt(&p, &t);
        assert!(inf.ends_with("[NEG] <SEP>"));
        assert_eq!(parse_sample(&inf, &t).unwrap().1, "");
    }

    #[test]
    fn separator_inside_report_is_escaped() {
        let t = tax();
        let mut slots = vec![None; REGION_COUNT];
        slots[4] = t.index_of("pneumothorax");
        let p = RegionalPrompt::from_slots(slots).unwrap();
        let report = r"odd <SEP> text with \ backslash and <\SEP>";
        let s = serialize_training_sample(&p, report, &t);
        assert_eq!(s.matches(SEPARATOR).count(), 1);
        assert_eq!(parse_sample(&s, &t).unwrap(), (p, report.to_string()));
    }

    #[test]
    fn prompt_parse_rejects_bad_tokens() {
        let t = tax();
        assert!(RegionalPrompt::parse("[NEG] [NEG]", &t).is_err());
        let mut toks = vec![NEG_TOKEN; 29];
        toks[0] = "fracture";
        assert!(RegionalPrompt::from_tokens(&toks, &t).is_err());
    }

    #[test]
    fn text_prompt_examples() {
        let t = tax();
        let v = RegionVocabulary::chest_imagenome();
        assert_eq!(build_text_prompt(&[], &v, &t), TEXT_PROMPT_HEADER);
        let left = v.index_of("left lung").unwrap();
        let f = [(left, set(&t, &["pleural effusion"]))];
        assert_eq!(
            build_text_prompt(&f, &v, &t),
            format!("{TEXT_PROMPT_HEADER}\n1. pleural effusion may be present in the left lung.")
        );
        let right = v.index_of("right lung").unwrap();
        let both = set(&t, &["pleural effusion", "atelectasis"]);
        let f = [(left, both.clone()), (right, both)];
        assert_eq!(
            build_text_prompt(&f, &v, &t),
            format!(
                "{TEXT_PROMPT_HEADER}\n1. atelectasis and pleural effusion may be present in the right lung and left lung."
            )
        );
    }
}
