//! Seeded synthetic scenarios: ground-truth scene graphs on a fixed region
//! layout, the detections a perfect detector would emit, and a noisy copy.
//!
//! Each image draws from its own ChaCha8 streams (`2i` for ground truth,
//! `2i + 1` for noise), so ground truth does not change with the noise
//! settings and images can be generated in any order.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{check_unit, Error, Result};
use crate::geometry::{NmsConfig, ScoredBox};
use crate::metrics::detection::{detection_eval, lesion_ground_truth, DetectionEvalConfig, DetectionEvalImage, DetectionEvalResult};
use crate::metrics::region::{region_eval, RegionEvalResult};
use crate::metrics::report::MetricReport;
use crate::model::{
    check_schema, BBoxXyxy, ClassSet, DetectionSet, RegionDetection, RegionEntry, RegionVocabulary, SceneGraph,
    REGION_COUNT,
};
use crate::prompts::{build_training_prompt, infer_prompt, RegionalPrompt, DEFAULT_ASSIGN_IOU};
use crate::taxonomy::{remove_root_redundancy, LesionTaxonomy};

const DEFAULT_TEMPLATE: &str = include_str!("../config/region_template.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateBox {
    pub name: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub canvas: [f64; 2],
    pub boxes: Vec<TemplateBox>,
}

/// One box per region on a fixed canvas, indexed like the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTemplate {
    pub canvas: [f64; 2],
    pub boxes: Vec<BBoxXyxy>,
}

impl RegionTemplate {
    pub fn from_config(cfg: &TemplateConfig, vocab: &RegionVocabulary) -> Result<Self> {
        check_schema(cfg.schema_version)?;
        if cfg.boxes.len() != vocab.len() {
            return Err(Error::LengthMismatch {
                what: "template boxes",
                left: cfg.boxes.len(),
                right: vocab.len(),
            });
        }
        let mut boxes: Vec<Option<BBoxXyxy>> = vec![None; vocab.len()];
        for b in &cfg.boxes {
            let r = vocab.resolve(&b.name)?;
            let bbox = BBoxXyxy::from_array(b.bbox)?;
            if bbox.x2() > cfg.canvas[0] || bbox.y2() > cfg.canvas[1] {
                return Err(Error::Config(format!("template box {:?} leaves the canvas", b.name)));
            }
            if boxes[r].replace(bbox).is_some() {
                return Err(Error::Config(format!("template lists {:?} twice", b.name)));
            }
        }
        Ok(Self {
            canvas: cfg.canvas,
            boxes: boxes.into_iter().map(|b| b.expect("every region filled")).collect(),
        })
    }

    pub fn default_chest(vocab: &RegionVocabulary) -> Result<Self> {
        let cfg: TemplateConfig = serde_json::from_str(DEFAULT_TEMPLATE)?;
        Self::from_config(&cfg, vocab)
    }
}

/// Detector perturbations. All zero means the noisy detections equal the
/// perfect ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Per-coordinate Gaussian jitter in pixels, clamped at three sigma.
    pub jitter_sigma: f64,
    pub region_drop: f64,
    pub lesion_drop: f64,
    /// Mean of the Poisson number of spurious lesion boxes per image.
    pub false_positive_rate: f64,
    /// Gaussian noise added to each nonzero class confidence.
    pub confidence_sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("region drop probability", self.region_drop)?;
        check_unit("lesion drop probability", self.lesion_drop)?;
        for (what, v) in [
            ("jitter sigma", self.jitter_sigma),
            ("false positive rate", self.false_positive_rate),
            ("confidence sigma", self.confidence_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::OutOfRange {
                    what,
                    value: v,
                    expected: ">= 0",
                });
            }
        }
        Ok(())
    }
}

/// How ground-truth findings are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthConfig {
    pub negative_fraction: f64,
    /// Lesion-bearing regions per positive image: 1 + Poisson(this).
    pub extra_regions_mean: f64,
    pub max_findings_per_region: usize,
    /// Per-image uniform scale range applied to the template, about the
    /// canvas centre.
    pub scale_range: [f64; 2],
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            negative_fraction: 0.3,
            extra_regions_mean: 1.5,
            max_findings_per_region: 2,
            scale_range: [0.9, 1.0],
        }
    }
}

impl GroundTruthConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("negative fraction", self.negative_fraction)?;
        if !(self.extra_regions_mean.is_finite() && self.extra_regions_mean >= 0.0) {
            return Err(Error::OutOfRange {
                what: "extra regions mean",
                value: self.extra_regions_mean,
                expected: ">= 0",
            });
        }
        if self.max_findings_per_region == 0 {
            return Err(Error::Config("max_findings_per_region must be at least 1".into()));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("scale range {lo}..{hi} must lie in (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub scene_graphs: Vec<SceneGraph>,
    pub perfect: Vec<DetectionSet>,
    pub noisy: Vec<DetectionSet>,
    pub expected_prompts: Vec<RegionalPrompt>,
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn place(template: &RegionTemplate, rng: &mut ChaCha8Rng, scale_range: [f64; 2]) -> Vec<BBoxXyxy> {
    let [w, h] = template.canvas;
    let (cx, cy) = (w / 2.0, h / 2.0);
    let s = if scale_range[0] < scale_range[1] {
        rng.gen_range(scale_range[0]..=scale_range[1])
    } else {
        scale_range[0]
    };
    let scaled: Vec<[f64; 4]> = template
        .boxes
        .iter()
        .map(|b| {
            [
                cx + s * (b.x1() - cx),
                cy + s * (b.y1() - cy),
                cx + s * (b.x2() - cx),
                cy + s * (b.y2() - cy),
            ]
        })
        .collect();
    // shift the whole layout as far as the canvas allows
    let min_x = scaled.iter().map(|b| b[0]).fold(f64::INFINITY, f64::min);
    let min_y = scaled.iter().map(|b| b[1]).fold(f64::INFINITY, f64::min);
    let max_x = scaled.iter().map(|b| b[2]).fold(0.0, f64::max);
    let max_y = scaled.iter().map(|b| b[3]).fold(0.0, f64::max);
    let dx = rng.gen_range(-min_x..=(w - max_x));
    let dy = rng.gen_range(-min_y..=(h - max_y));
    scaled
        .iter()
        .map(|b| {
            BBoxXyxy::new(
                round2(b[0] + dx).max(0.0),
                round2(b[1] + dy).max(0.0),
                round2(b[2] + dx),
                round2(b[3] + dy),
            )
            .expect("scaled template boxes stay valid")
        })
        .collect()
}

fn sample_findings(
    taxonomy: &LesionTaxonomy,
    classes: &WeightedIndex<f64>,
    cfg: &GroundTruthConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, ClassSet)> {
    if rng.gen_bool(cfg.negative_fraction) {
        return Vec::new();
    }
    let extra = if cfg.extra_regions_mean > 0.0 {
        Poisson::new(cfg.extra_regions_mean).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    let k = (1 + extra).min(REGION_COUNT);
    let mut regions = sample(rng, REGION_COUNT, k).into_vec();
    regions.sort_unstable();
    regions
        .into_iter()
        .map(|r| {
            let n = rng.gen_range(1..=cfg.max_findings_per_region);
            let mut set = ClassSet::new();
            for _ in 0..n {
                set.extend(taxonomy.with_ancestors(classes.sample(rng)));
            }
            (r, set)
        })
        .collect()
}

fn perfect_detections(sg: &SceneGraph, taxonomy: &LesionTaxonomy) -> DetectionSet {
    let region_detections = sg
        .regions
        .iter()
        .map(|e| RegionDetection {
            region: e.region,
            bbox: e.bbox,
            score: 1.0,
        })
        .collect();
    let lesion_detections = sg
        .regions
        .iter()
        .filter(|e| !e.lesions.is_empty())
        .map(|e| {
            let mut conf = vec![0.0; taxonomy.len()];
            for c in remove_root_redundancy(taxonomy, &e.lesions) {
                conf[c] = 1.0;
            }
            ScoredBox {
                bbox: e.bbox,
                objectness: 1.0,
                class_conf: conf,
            }
        })
        .collect();
    DetectionSet {
        image_id: sg.image_id.clone(),
        region_detections,
        lesion_detections,
    }
}

fn jitter(b: &BBoxXyxy, sigma: f64, canvas: [f64; 2], rng: &mut ChaCha8Rng) -> BBoxXyxy {
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let mut c = b.to_array();
    for v in &mut c {
        *v += normal.sample(rng).clamp(-3.0 * sigma, 3.0 * sigma);
    }
    let fix = |lo: f64, hi: f64, max: f64| {
        let (lo, hi) = (lo.min(hi).clamp(0.0, max - 1.0), lo.max(hi).clamp(0.0, max));
        let lo = round2(lo);
        (lo, round2(hi).max(lo + 1.0))
    };
    let (x1, x2) = fix(c[0], c[2], canvas[0]);
    let (y1, y2) = fix(c[1], c[3], canvas[1]);
    BBoxXyxy::new(x1, y1, x2, y2).expect("jittered box repaired")
}

fn add_noise(
    perfect: &DetectionSet,
    noise: &NoiseConfig,
    canvas: [f64; 2],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> DetectionSet {
    let mut out = perfect.clone();
    if noise.region_drop > 0.0 {
        out.region_detections.retain(|_| !rng.gen_bool(noise.region_drop));
    }
    if noise.lesion_drop > 0.0 {
        out.lesion_detections.retain(|_| !rng.gen_bool(noise.lesion_drop));
    }
    if noise.jitter_sigma > 0.0 {
        for d in &mut out.region_detections {
            d.bbox = jitter(&d.bbox, noise.jitter_sigma, canvas, rng);
        }
        for d in &mut out.lesion_detections {
            d.bbox = jitter(&d.bbox, noise.jitter_sigma, canvas, rng);
        }
    }
    if noise.confidence_sigma > 0.0 {
        let normal = Normal::new(0.0, noise.confidence_sigma).expect("sigma is positive");
        for d in &mut out.lesion_detections {
            for c in d.class_conf.iter_mut().filter(|c| **c > 0.0) {
                *c = (*c + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    if noise.false_positive_rate > 0.0 {
        let n = Poisson::new(noise.false_positive_rate)
            .expect("positive rate")
            .sample(rng) as usize;
        for _ in 0..n {
            let w = rng.gen_range(40.0..160.0);
            let h = rng.gen_range(40.0..160.0);
            let x = rng.gen_range(0.0..canvas[0] - w);
            let y = rng.gen_range(0.0..canvas[1] - h);
            let mut conf = vec![0.0; num_classes];
            conf[rng.gen_range(0..num_classes)] = round2(rng.gen_range(0.5..=1.0));
            out.lesion_detections.push(ScoredBox {
                bbox: BBoxXyxy::new(round2(x), round2(y), round2(x + w), round2(y + h)).expect("positive size"),
                objectness: round2(rng.gen_range(0.5..=1.0)),
                class_conf: conf,
            });
        }
    }
    out
}

pub fn generate_scenario(
    n_images: usize,
    taxonomy: &LesionTaxonomy,
    template: &RegionTemplate,
    noise: &NoiseConfig,
) -> Result<Scenario> {
    generate_scenario_with(n_images, taxonomy, template, noise, &GroundTruthConfig::default())
}

pub fn generate_scenario_with(
    n_images: usize,
    taxonomy: &LesionTaxonomy,
    template: &RegionTemplate,
    noise: &NoiseConfig,
    gt_cfg: &GroundTruthConfig,
) -> Result<Scenario> {
    if n_images == 0 {
        return Err(Error::EmptyInput("simulated images"));
    }
    if template.boxes.len() != REGION_COUNT {
        return Err(Error::LengthMismatch {
            what: "template boxes",
            left: template.boxes.len(),
            right: REGION_COUNT,
        });
    }
    noise.validate()?;
    gt_cfg.validate()?;
    let classes = WeightedIndex::new((0..taxonomy.len()).map(|c| taxonomy.frequency(c)))
        .map_err(|e| Error::Config(format!("taxonomy frequencies cannot be sampled: {e}")))?;
    let width = n_images.to_string().len();

    let mut sc = Scenario {
        scene_graphs: Vec::with_capacity(n_images),
        perfect: Vec::with_capacity(n_images),
        noisy: Vec::with_capacity(n_images),
        expected_prompts: Vec::with_capacity(n_images),
    };
    for i in 0..n_images {
        let mut gt_rng = image_rng(noise.seed, 2 * i as u64);
        let boxes = place(template, &mut gt_rng, gt_cfg.scale_range);
        let findings = sample_findings(taxonomy, &classes, gt_cfg, &mut gt_rng);
        let mut regions: Vec<RegionEntry> = boxes
            .into_iter()
            .enumerate()
            .map(|(region, bbox)| RegionEntry {
                region,
                bbox,
                lesions: ClassSet::new(),
            })
            .collect();
        for (r, set) in findings {
            regions[r].lesions = set;
        }
        let sg = SceneGraph {
            image_id: format!("sim-{i:0width$}"),
            regions,
        };
        let perfect = perfect_detections(&sg, taxonomy);
        let mut noise_rng = image_rng(noise.seed, 2 * i as u64 + 1);
        let noisy = add_noise(&perfect, noise, template.canvas, taxonomy.len(), &mut noise_rng);
        sc.expected_prompts.push(build_training_prompt(&sg, taxonomy)?);
        sc.scene_graphs.push(sg);
        sc.perfect.push(perfect);
        sc.noisy.push(noisy);
    }
    Ok(sc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub nms: NmsConfig,
    pub assign_iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nms: NmsConfig::default(),
            assign_iou: DEFAULT_ASSIGN_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub prompts: Vec<RegionalPrompt>,
    /// Share of the `29 * n` prompt slots that equal the expected prompts.
    pub prompt_agreement: f64,
    pub detection: DetectionEvalResult,
    pub region: RegionEvalResult,
    pub report: MetricReport,
}

/// NMS, assignment and prompt building on the noisy detections, scored
/// against the scenario's ground truth.
pub fn run_pipeline(
    scenario: &Scenario,
    taxonomy: &LesionTaxonomy,
    vocab: &RegionVocabulary,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    let mut prompts = Vec::with_capacity(scenario.noisy.len());
    let mut eval_images = Vec::with_capacity(scenario.noisy.len());
    let mut agree = 0usize;
    for ((det, sg), expected) in scenario
        .noisy
        .iter()
        .zip(&scenario.scene_graphs)
        .zip(&scenario.expected_prompts)
    {
        let inferred = infer_prompt(det, cfg.nms, cfg.assign_iou, taxonomy)?;
        agree += inferred.prompt.agreement(expected);
        eval_images.push(DetectionEvalImage {
            image_id: sg.image_id.clone(),
            gt: lesion_ground_truth(sg, taxonomy),
            predictions: inferred.kept,
        });
        prompts.push(inferred.prompt);
    }
    let prompt_agreement = agree as f64 / (REGION_COUNT * prompts.len()).max(1) as f64;
    let det_cfg = DetectionEvalConfig {
        conf_threshold: cfg.nms.conf_threshold,
        ..Default::default()
    };
    let detection = detection_eval(&eval_images, taxonomy.len(), &det_cfg)?;
    let region = region_eval(&scenario.scene_graphs, &scenario.noisy, vocab.names())?;

    let mut report = MetricReport::new("simulate");
    report.config.insert("conf_threshold".into(), json!(cfg.nms.conf_threshold));
    report.config.insert("nms_iou".into(), json!(cfg.nms.iou_threshold));
    report.config.insert("assign_iou".into(), json!(cfg.assign_iou));
    report.config.insert("iou_thresholds".into(), json!(det_cfg.iou_thresholds));
    report.metrics.insert("images".into(), json!(prompts.len()));
    report.metrics.insert("prompt_agreement".into(), json!(prompt_agreement));
    for t in &detection.thresholds {
        let k = format!("{:.2}", t.iou_threshold);
        report.metrics.insert(format!("map@{k}"), json!(t.map));
        report.metrics.insert(format!("mean_precision@{k}"), json!(t.mean_precision));
        report.metrics.insert(format!("mean_recall@{k}"), json!(t.mean_recall));
    }
    report.metrics.insert("region_average_iou".into(), json!(region.average_iou));
    report
        .metrics
        .insert("detected_regions_per_image".into(), json!(region.detected_per_image));
    let class_names: Vec<String> = (0..taxonomy.len()).map(|c| taxonomy.name(c).to_string()).collect();
    report.warnings.extend(detection.warnings(Some(&class_names)));
    report.warnings.extend(region.warnings.iter().cloned());
    Ok(PipelineResult {
        prompts,
        prompt_agreement,
        detection,
        region,
        report,
    })
}
