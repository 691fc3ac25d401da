use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use parp_core::config::{ToolkitConfig, CONFIG_ENV};
use parp_core::geometry::NmsConfig;
use parp_core::ingest::{ingest_dataset, split_map, IngestOptions, SplitRecord};
use parp_core::io::{read_json, read_jsonl, read_jsonl_with, write_json_pretty, write_jsonl, write_text};
use parp_core::manifest::{digests, manifest_path, unix_ms, RunManifest};
use parp_core::metrics::ce::{Averaging, LabelMatrix, LabelRecord};
use parp_core::metrics::detection::{lesion_ground_truth, DetectionEvalConfig, DetectionEvalImage};
use parp_core::metrics::expert::{ExpertScore, RubricMap};
use parp_core::metrics::nlg::{Corpus, MetricRegistry, NlgOptions, ReportRecord, Smoothing, DEFAULT_METRICS};
use parp_core::metrics::region::region_eval;
use parp_core::metrics::report::{ce_report, detection_report, expert_report, nlg_report, region_report};
use parp_core::model::{
    validate_detections, validate_scene_graph, DetectionRecord, DetectionSet, RegionVocabulary, SceneGraph,
    SceneGraphRecord, SCHEMA_VERSION,
};
use parp_core::prompts::{
    assignment_findings, build_text_prompt, build_training_prompt, infer_prompt, serialize_inference_prompt,
    serialize_training_sample, PromptRecord,
};
use parp_core::simulate::{generate_scenario, run_pipeline, NoiseConfig, PipelineConfig};
use parp_core::squeeze::{squeeze_record, SingleLabelRecord, SqueezeSummary};
use parp_core::taxonomy::{filter_tail_classes, LesionTaxonomy, RawLabelStats};

#[derive(Parser, Debug)]
#[command(name = "parp", version, about = "Region prompts, detector losses and evaluation for chest X-ray report generation")]
struct Cli {
    /// Toolkit config file (JSON).
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Drop lesion classes whose share of all labels is below a threshold.
    Reduce(ReduceArgs),
    /// Merge same-box single-label annotations into multi-label boxes.
    Squeeze(SqueezeArgs),
    /// Build region prompts from scene graphs or detections.
    #[command(subcommand)]
    Prompt(PromptCommand),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Generate a synthetic scenario and run the prompt pipeline on it.
    Simulate(SimulateArgs),
    /// Filter a scene-graph dataset.
    Ingest(IngestArgs),
    /// Re-run the command recorded in a manifest and verify its outputs.
    Replay(ReplayArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn open_unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1)"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be a finite value >= 0"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be a finite value > 0"))
    }
}

#[derive(Args, Debug, Serialize)]
struct ReduceArgs {
    /// Label statistics: `{"counts": {class: n, ...}}`.
    #[arg(long, value_name = "FILE")]
    stats: PathBuf,
    #[arg(long, value_parser = open_unit_interval)]
    threshold: Option<f64>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SqueezeArgs {
    /// Single-label annotations, one image per line.
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
    /// Per-coordinate tolerance for treating two boxes as the same.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    tolerance: f64,
    /// Where to write the multi-label records.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
enum PromptCommand {
    /// Prompts from ground-truth scene graphs.
    Train(PromptTrainArgs),
    /// Prompts from detector outputs.
    Infer(PromptInferArgs),
}

#[derive(Args, Debug, Serialize)]
struct PromptTrainArgs {
    #[arg(long, value_name = "FILE")]
    scene_graphs: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Also write `<prompt> <SEP> <findings>` training samples.
    #[arg(long, value_name = "FILE")]
    samples: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PromptInferArgs {
    #[arg(long, value_name = "FILE")]
    detections: PathBuf,
    /// Assignment IoU threshold.
    #[arg(long, value_parser = unit_interval)]
    iou: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    conf: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    nms_iou: Option<f64>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Also write decoder inputs `<prompt> <SEP>`.
    #[arg(long, value_name = "FILE")]
    samples: Option<PathBuf>,
    /// Also write free-text prompts listing the detected findings.
    #[arg(long, value_name = "FILE")]
    text_prompts: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalKind {
    Nlg,
    Ce,
    Det,
    Region,
    Expert,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SmoothingArg {
    None,
    AddOne,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum AveragingArg {
    Micro,
    Macro,
    Example,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    kind: EvalKind,
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    #[arg(long = "ref", value_name = "FILE")]
    reference: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Text metrics to compute (nlg).
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long, value_enum)]
    smoothing: Option<SmoothingArg>,
    #[arg(long, value_parser = positive)]
    rouge_beta: Option<f64>,
    /// Averaging mode (ce).
    #[arg(long, value_enum, default_value = "micro")]
    averaging: AveragingArg,
    /// Matching IoU thresholds (det).
    #[arg(long, value_delimiter = ',', value_parser = unit_interval)]
    iou: Vec<f64>,
    /// Confidence threshold for per-class P/R (det).
    #[arg(long, value_parser = unit_interval)]
    conf: Option<f64>,
    /// Also report mAP averaged over IoU 0.50:0.05:0.95 (det).
    #[arg(long)]
    coco_sweep: bool,
    /// Rubric grade to number map (expert).
    #[arg(long, value_name = "FILE")]
    rubric_map: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    images: u64,
    /// Overrides the seed in the noise file.
    #[arg(long)]
    seed: Option<u64>,
    /// Noise settings (JSON); all zero when omitted.
    #[arg(long, value_name = "FILE")]
    noise: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct IngestArgs {
    #[arg(long, value_name = "FILE", required = true, num_args = 1..)]
    scene_graphs: Vec<PathBuf>,
    /// Share of negative images to keep.
    #[arg(long, value_parser = unit_interval)]
    keep_negatives: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep records that have no findings text.
    #[arg(long)]
    keep_missing_findings: bool,
    /// Official split assignment, `{"image_id", "split"}` per line.
    #[arg(long, value_name = "FILE")]
    splits: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// Loaded config plus the vocabularies it names.
struct Ctx {
    cfg: ToolkitConfig,
    config_path: Option<PathBuf>,
    taxonomy: LesionTaxonomy,
    vocab: RegionVocabulary,
}

impl Ctx {
    fn load(config_path: Option<PathBuf>) -> anyhow::Result<Self> {
        let cfg = match &config_path {
            Some(p) => ToolkitConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => ToolkitConfig::default(),
        };
        let taxonomy = cfg.load_taxonomy()?;
        let vocab = cfg.load_regions()?;
        Ok(Self {
            cfg,
            config_path,
            taxonomy,
            vocab,
        })
    }

    fn config_inputs(&self) -> Vec<PathBuf> {
        self.config_path
            .iter()
            .cloned()
            .chain(self.cfg.referenced_files().into_iter().map(Path::to_path_buf))
            .collect()
    }
}

/// What a command read and wrote, for its manifest.
#[derive(Default)]
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Where the manifest goes; defaults to the first output.
    manifest_for: Option<PathBuf>,
    settings: Value,
    seed: Option<u64>,
}

fn emit(out: Option<&Path>, text: &str, outcome: &mut Outcome) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            write_text(p, text)?;
            outcome.outputs.push(p.to_path_buf());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_jsonl<T: Serialize>(out: Option<&Path>, records: &[T], outcome: &mut Outcome) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            write_jsonl(p, records)?;
            outcome.outputs.push(p.to_path_buf());
        }
        None => {
            for r in records {
                println!("{}", serde_json::to_string(r)?);
            }
        }
    }
    Ok(())
}

fn pretty(v: &impl Serialize) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn load_scene_graphs(path: &Path, ctx: &Ctx) -> anyhow::Result<Vec<(SceneGraphRecord, SceneGraph)>> {
    Ok(read_jsonl_with(path, |r: SceneGraphRecord| {
        let sg = validate_scene_graph(&r, &ctx.vocab, &ctx.taxonomy)?;
        Ok((r, sg))
    })?)
}

fn load_detections(path: &Path, ctx: &Ctx) -> anyhow::Result<Vec<DetectionSet>> {
    Ok(read_jsonl_with(path, |r: DetectionRecord| {
        validate_detections(&r, &ctx.vocab, &ctx.taxonomy)
    })?)
}

fn run_reduce(a: &ReduceArgs, ctx: &Ctx) -> anyhow::Result<Outcome> {
    let threshold = a.threshold.unwrap_or(ctx.cfg.tail_threshold);
    let stats: RawLabelStats = read_json(&a.stats)?;
    let res = filter_tail_classes(&stats, threshold)?;
    let mut o = Outcome {
        inputs: vec![a.stats.clone()],
        settings: json!({ "threshold": threshold }),
        ..Default::default()
    };
    let doc = json!({ "schema_version": SCHEMA_VERSION, "result": res });
    emit(a.out.as_deref(), &pretty(&doc)?, &mut o)?;
    Ok(o)
}

fn run_squeeze(a: &SqueezeArgs, ctx: &Ctx) -> anyhow::Result<Outcome> {
    let records: Vec<SingleLabelRecord> = read_jsonl(&a.labels)?;
    let mut summary = SqueezeSummary::default();
    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let (boxes, rec) = squeeze_record(r, &ctx.taxonomy, a.tolerance).with_context(|| format!("image {:?}", r.image_id))?;
        summary.add(r.boxes.len(), &boxes);
        out.push(rec);
    }
    let mut o = Outcome {
        inputs: vec![a.labels.clone()],
        settings: json!({ "tolerance": a.tolerance }),
        ..Default::default()
    };
    if let Some(p) = &a.out {
        write_jsonl(p, &out)?;
        o.outputs.push(p.clone());
    }
    print!("{}", pretty(&summary)?);
    Ok(o)
}

#[derive(Serialize)]
struct TextRecord {
    schema_version: u32,
    image_id: String,
    text: String,
}

fn text_record(image_id: &str, text: String) -> TextRecord {
    TextRecord {
        schema_version: SCHEMA_VERSION,
        image_id: image_id.to_string(),
        text,
    }
}

fn run_prompt_train(a: &PromptTrainArgs, ctx: &Ctx) -> anyhow::Result<Outcome> {
    let graphs = load_scene_graphs(&a.scene_graphs, ctx)?;
    let mut prompts = Vec::with_capacity(graphs.len());
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (rec, sg) in &graphs {
        let p = build_training_prompt(sg, &ctx.taxonomy)?;
        match &rec.findings {
            Some(f) => samples.push(text_record(&sg.image_id, serialize_training_sample(&p, f, &ctx.taxonomy))),
            None => skipped += 1,
        }
        prompts.push(PromptRecord::new(&sg.image_id, &p, &ctx.taxonomy));
    }
    let mut o = Outcome {
        inputs: vec![a.scene_graphs.clone()],
        settings: json!({}),
        ..Default::default()
    };
    emit_jsonl(a.out.as_deref(), &prompts, &mut o)?;
    if let Some(p) = &a.samples {
        if skipped > 0 {
            eprintln!("warning: {skipped} scene graphs have no findings text and were left out of {}", p.display());
        }
        write_jsonl(p, &samples)?;
        o.outputs.push(p.clone());
    }
    Ok(o)
}

fn run_prompt_infer(a: &PromptInferArgs, ctx: &Ctx) -> anyhow::Result<Outcome> {
    let assign_iou = a.iou.unwrap_or(ctx.cfg.assign_iou);
    let nms = NmsConfig::new(
        a.conf.unwrap_or(ctx.cfg.conf_threshold),
        a.nms_iou.unwrap_or(ctx.cfg.nms_iou),
    )?;
    let dets = load_detections(&a.detections, ctx)?;
    let mut prompts = Vec::with_capacity(dets.len());
    let mut samples = Vec::with_capacity(dets.len());
    let mut texts = Vec::with_capacity(dets.len());
    for d in &dets {
        let inf = infer_prompt(d, nms, assign_iou, &ctx.taxonomy)?;
        prompts.push(PromptRecord::new(&d.image_id, &inf.prompt, &ctx.taxonomy));
        samples.push(text_record(&d.image_id, serialize_inference_prompt(&inf.prompt, &ctx.taxonomy)));
        let findings = assignment_findings(&inf.assignment, &inf.kept);
        texts.push(text_record(&d.image_id, build_text_prompt(&findings, &ctx.vocab, &ctx.taxonomy)));
    }
    let mut o = Outcome {
        inputs: vec![a.detections.clone()],
        settings: json!({
            "assign_iou": assign_iou,
            "conf_threshold": nms.conf_threshold,
            "nms_iou": nms.iou_threshold,
        }),
        ..Default::default()
    };
    emit_jsonl(a.out.as_deref(), &prompts, &mut o)?;
    for (path, recs) in [(&a.samples, &samples), (&a.text_prompts, &texts)] {
        if let Some(p) = path {
            write_jsonl(p, recs)?;
            o.outputs.push(p.clone());
        }
    }
    Ok(o)
}

fn require_ref(a: &EvalArgs) -> anyhow::Result<&Path> {
    match &a.reference {
        Some(r) => Ok(r),
        None => bail!("eval {:?} needs --ref", a.kind),
    }
}

fn pair_detections(
    graphs: &[(SceneGraphRecord, SceneGraph)],
    dets: Vec<DetectionSet>,
    warnings: &mut Vec<String>,
) -> anyhow::Result<HashMap<String, DetectionSet>> {
    let mut by_id = HashMap::with_capacity(dets.len());
    for d in dets {
        let id = d.image_id.clone();
        if by_id.insert(id.clone(), d).is_some() {
            bail!("duplicate image id {id:?} in predictions");
        }
    }
    let gt_ids: HashSet<&str> = graphs.iter().map(|(_, g)| g.image_id.as_str()).collect();
    let extra = by_id.keys().filter(|k| !gt_ids.contains(k.as_str())).count();
    if extra > 0 {
        warnings.push(format!("{extra} predicted images have no ground truth and were ignored"));
    }
    Ok(by_id)
}

fn run_eval(a: &EvalArgs, ctx: &Ctx) -> anyhow::Result<Outcome> {
    let mut o = Outcome {
        inputs: vec![a.pred.clone()],
        ..Default::default()
    };
    let report = match a.kind {
        EvalKind::Nlg => {
            let r = require_ref(a)?;
            o.inputs.push(r.to_path_buf());
            let pred: Vec<ReportRecord> = read_jsonl(&a.pred)?;
            let refs: Vec<ReportRecord> = read_jsonl(r)?;
            let corpus = Corpus::from_records(&pred, &refs)?;
            let opts = NlgOptions {
                smoothing: match a.smoothing {
                    Some(SmoothingArg::AddOne) => Smoothing::AddOne,
                    Some(SmoothingArg::None) => Smoothing::None,
                    None => ctx.cfg.smoothing,
                },
                rouge_beta: a.rouge_beta.unwrap_or(ctx.cfg.rouge_beta),
            };
            let names: Vec<&str> = if a.metrics.is_empty() {
                DEFAULT_METRICS.to_vec()
            } else {
                a.metrics.iter().map(String::as_str).collect()
            };
            nlg_report(&corpus, &names, &opts, &MetricRegistry::default())?
        }
        EvalKind::Ce => {
            let r = require_ref(a)?;
            o.inputs.push(r.to_path_buf());
            let pred = LabelMatrix::new(read_jsonl::<LabelRecord>(&a.pred)?)?;
            let refs = LabelMatrix::new(read_jsonl::<LabelRecord>(r)?)?;
            let averaging = match a.averaging {
                AveragingArg::Micro => Averaging::Micro,
                AveragingArg::Macro => Averaging::Macro,
                AveragingArg::Example => Averaging::Example,
            };
            ce_report(&pred, &refs, averaging)?
        }
        EvalKind::Det => {
            let r = require_ref(a)?;
            o.inputs.push(r.to_path_buf());
            let graphs = load_scene_graphs(r, ctx)?;
            let mut warnings = Vec::new();
            let mut by_id = pair_detections(&graphs, load_detections(&a.pred, ctx)?, &mut warnings)?;
            let images: Vec<DetectionEvalImage> = graphs
                .iter()
                .map(|(_, g)| DetectionEvalImage {
                    image_id: g.image_id.clone(),
                    gt: lesion_ground_truth(g, &ctx.taxonomy),
                    predictions: by_id
                        .remove(&g.image_id)
                        .map(|d| d.lesion_detections)
                        .unwrap_or_default(),
                })
                .collect();
            let mut cfg = DetectionEvalConfig {
                conf_threshold: a.conf.unwrap_or(ctx.cfg.conf_threshold),
                coco_sweep: a.coco_sweep,
                ..Default::default()
            };
            if !a.iou.is_empty() {
                cfg.iou_thresholds = a.iou.clone();
            }
            let names: Vec<String> = (0..ctx.taxonomy.len()).map(|c| ctx.taxonomy.name(c).to_string()).collect();
            let mut rep = detection_report(&images, &names, &cfg)?;
            rep.warnings.extend(warnings);
            rep
        }
        EvalKind::Region => {
            let r = require_ref(a)?;
            o.inputs.push(r.to_path_buf());
            let graphs = load_scene_graphs(r, ctx)?;
            let mut warnings = Vec::new();
            let by_id = pair_detections(&graphs, load_detections(&a.pred, ctx)?, &mut warnings)?;
            let gt: Vec<SceneGraph> = graphs.into_iter().map(|(_, g)| g).collect();
            let preds: Vec<DetectionSet> = gt
                .iter()
                .filter_map(|g| by_id.get(&g.image_id).cloned())
                .collect();
            let res = region_eval(&gt, &preds, ctx.vocab.names())?;
            let mut rep = region_report(&res);
            rep.warnings.extend(warnings);
            rep
        }
        EvalKind::Expert => {
            let map: RubricMap = match &a.rubric_map {
                Some(p) => {
                    o.inputs.push(p.clone());
                    read_json(p)?
                }
                None => ctx.cfg.rubric_map.clone(),
            };
            let scores: Vec<ExpertScore> = read_jsonl(&a.pred)?;
            expert_report(&scores, &map)?
        }
    };
    o.settings = json!({ "report_config": report.config });
    emit(a.out.as_deref(), &report.to_pretty_json(), &mut o)?;
    Ok(o)
}

fn run_simulate(a: &SimulateArgs, ctx: &Ctx) -> anyhow::Result<Outcome> {
    let mut noise: NoiseConfig = match &a.noise {
        Some(p) => read_json(p)?,
        None => NoiseConfig::default(),
    };
    if let Some(s) = a.seed {
        noise.seed = s;
    }
    let template = ctx.cfg.load_template(&ctx.vocab)?;
    let scenario = generate_scenario(a.images as usize, &ctx.taxonomy, &template, &noise)?;
    let pipeline = PipelineConfig {
        nms: NmsConfig::new(ctx.cfg.conf_threshold, ctx.cfg.nms_iou)?,
        assign_iou: ctx.cfg.assign_iou,
    };
    let result = run_pipeline(&scenario, &ctx.taxonomy, &ctx.vocab, &pipeline)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut o = Outcome {
        inputs: a.noise.iter().cloned().collect(),
        manifest_for: Some(a.out.clone()),
        settings: json!({ "noise": noise }),
        seed: Some(noise.seed),
        ..Default::default()
    };
    let sg: Vec<SceneGraphRecord> = scenario
        .scene_graphs
        .iter()
        .map(|g| g.to_record(&ctx.vocab, &ctx.taxonomy))
        .collect();
    let det = |sets: &[DetectionSet]| -> Vec<DetectionRecord> {
        sets.iter().map(|d| d.to_record(&ctx.vocab, &ctx.taxonomy)).collect()
    };
    let prompts = |ps: &[parp_core::prompts::RegionalPrompt]| -> Vec<PromptRecord> {
        ps.iter()
            .zip(&scenario.scene_graphs)
            .map(|(p, g)| PromptRecord::new(&g.image_id, p, &ctx.taxonomy))
            .collect()
    };
    let mut emit = |name: &str, write: &dyn Fn(&Path) -> parp_core::Result<()>| -> anyhow::Result<()> {
        let p = a.out.join(name);
        write(&p)?;
        o.outputs.push(p);
        Ok(())
    };
    emit("scene_graphs.jsonl", &|p| write_jsonl(p, &sg))?;
    emit("detections.jsonl", &|p| write_jsonl(p, &det(&scenario.noisy)))?;
    emit("detections_perfect.jsonl", &|p| write_jsonl(p, &det(&scenario.perfect)))?;
    emit("prompts_expected.jsonl", &|p| write_jsonl(p, &prompts(&scenario.expected_prompts)))?;
    emit("prompts_inferred.jsonl", &|p| write_jsonl(p, &prompts(&result.prompts)))?;
    let rp = a.out.join("report.json");
    write_json_pretty(&rp, &result.report)?;
    o.outputs.push(rp);
    print!("{}", result.report.to_pretty_json());
    Ok(o)
}

fn run_ingest(a: &IngestArgs, ctx: &Ctx) -> anyhow::Result<Outcome> {
    let opts = IngestOptions {
        require_findings: !a.keep_missing_findings,
        negative_keep_fraction: a.keep_negatives.unwrap_or(ctx.cfg.negative_keep_fraction),
        seed: a.seed,
    };
    let mut records = Vec::new();
    for p in &a.scene_graphs {
        records.extend(read_jsonl::<SceneGraphRecord>(p)?);
    }
    let splits = match &a.splits {
        Some(p) => Some(split_map(read_jsonl::<SplitRecord>(p)?)?),
        None => None,
    };
    let res = ingest_dataset(records, &ctx.vocab, &ctx.taxonomy, &opts, splits.as_ref())?;
    let mut o = Outcome {
        inputs: a.scene_graphs.iter().chain(&a.splits).cloned().collect(),
        settings: json!({ "options": opts }),
        seed: Some(opts.seed),
        ..Default::default()
    };
    if let Some(p) = &a.out {
        write_jsonl(p, &res.records)?;
        o.outputs.push(p.clone());
    }
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "options": opts,
        "total": res.total,
        "per_split": res.per_split,
        "warnings": res.warnings,
    });
    print!("{}", pretty(&summary)?);
    Ok(o)
}

fn run_replay(a: &ReplayArgs) -> anyhow::Result<()> {
    let m: RunManifest = read_json(&a.manifest)?;
    let stale = m.check_inputs();
    if !stale.is_empty() {
        for s in &stale {
            eprintln!("input changed: {} (recorded {}, now {})", s.path, s.expected, s.actual.as_deref().unwrap_or("missing"));
        }
        bail!("{} recorded inputs differ; refusing to replay", stale.len());
    }
    let exe = std::env::current_exe()?;
    let mut cmd = std::process::Command::new(exe);
    cmd.args(&m.command).current_dir(&m.cwd).stdout(std::process::Stdio::null());
    match &m.config_path {
        Some(p) => cmd.env(CONFIG_ENV, p),
        None => cmd.env_remove(CONFIG_ENV),
    };
    let status = cmd.status()?;
    if !status.success() {
        bail!("replayed command failed with {status}");
    }
    let changed = m.check_outputs();
    for c in &changed {
        eprintln!("output differs: {}", c.path);
    }
    if !changed.is_empty() {
        bail!("{} of {} outputs differ from the manifest", changed.len(), m.outputs.len());
    }
    println!("replayed {}: {} outputs identical", a.manifest.display(), m.outputs.len());
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Reduce(_) => "reduce",
        Command::Squeeze(_) => "squeeze",
        Command::Prompt(PromptCommand::Train(_)) => "prompt train",
        Command::Prompt(PromptCommand::Infer(_)) => "prompt infer",
        Command::Eval(_) => "eval",
        Command::Simulate(_) => "simulate",
        Command::Ingest(_) => "ingest",
        Command::Replay(_) => "replay",
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Replay(a) = &cli.command {
        return run_replay(a);
    }
    let started = unix_ms();
    let ctx = Ctx::load(cli.config.clone())?;
    let outcome = match &cli.command {
        Command::Reduce(a) => run_reduce(a, &ctx)?,
        Command::Squeeze(a) => run_squeeze(a, &ctx)?,
        Command::Prompt(PromptCommand::Train(a)) => run_prompt_train(a, &ctx)?,
        Command::Prompt(PromptCommand::Infer(a)) => run_prompt_infer(a, &ctx)?,
        Command::Eval(a) => run_eval(a, &ctx)?,
        Command::Simulate(a) => run_simulate(a, &ctx)?,
        Command::Ingest(a) => run_ingest(a, &ctx)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    let Some(target) = outcome.manifest_for.clone().or_else(|| outcome.outputs.first().cloned()) else {
        return Ok(());
    };
    let inputs: Vec<PathBuf> = outcome.inputs.iter().cloned().chain(ctx.config_inputs()).collect();
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        tool: "parp".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: std::env::args().skip(1).collect(),
        cwd: std::env::current_dir()?,
        config_path: ctx.config_path.clone(),
        config: json!({
            "command": command_name(&cli.command),
            "toolkit": ctx.cfg,
            "settings": outcome.settings,
        }),
        seed: outcome.seed,
        inputs: digests(inputs.iter().map(PathBuf::as_path))?,
        outputs: digests(outcome.outputs.iter().map(PathBuf::as_path))?,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    };
    write_json_pretty(&manifest_path(&target), &manifest)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
