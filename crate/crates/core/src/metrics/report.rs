//! A uniform JSON report wrapper shared by every evaluation command.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::Result;

use super::ce::{ce_metrics, Averaging, LabelMatrix};
use super::detection::{detection_eval, DetectionEvalConfig, DetectionEvalImage};
use super::expert::{aggregate_expert_scores, ExpertScore, RubricMap};
use super::nlg::{Corpus, MetricRegistry, NlgOptions};
use super::region::RegionEvalResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub kind: String,
    pub metrics: Map<String, Value>,
    pub config: Map<String, Value>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn new(kind: &str) -> Self {
        Self {
            schema_version: crate::model::SCHEMA_VERSION,
            kind: kind.to_string(),
            metrics: Map::new(),
            config: Map::new(),
            warnings: Vec::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).and_then(Value::as_f64)
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

pub fn nlg_report(corpus: &Corpus, names: &[&str], opts: &NlgOptions, registry: &MetricRegistry) -> Result<MetricReport> {
    let mut r = MetricReport::new("nlg");
    r.config.insert("tokenizer".into(), json!("lowercase, punctuation split"));
    for name in names {
        let m = registry.build(name, opts)?;
        r.metrics.insert(m.name().to_string(), json!(m.score(corpus)?));
        r.config.insert(m.name().to_string(), m.settings());
    }
    r.metrics.insert("samples".into(), json!(corpus.len()));
    Ok(r)
}

pub fn ce_report(candidate: &LabelMatrix, reference: &LabelMatrix, averaging: Averaging) -> Result<MetricReport> {
    let res = ce_metrics(candidate, reference, averaging)?;
    let mut r = MetricReport::new("ce");
    r.config.insert("averaging".into(), json!(averaging));
    r.config.insert("observations".into(), json!(reference.width()));
    if res.undefined {
        r.warnings
            .push("a precision, recall or F1 denominator was zero; the value is reported as 0".into());
    }
    r.metrics = object(json!({
        "precision": res.precision,
        "recall": res.recall,
        "f1": res.f1,
        "tp": res.tp,
        "fp": res.fp,
        "fn": res.fn_,
        "undefined": res.undefined,
    }));
    Ok(r)
}

fn threshold_key(t: f64) -> String {
    format!("{:.2}", t)
}

pub fn detection_report(
    images: &[DetectionEvalImage],
    class_names: &[String],
    cfg: &DetectionEvalConfig,
) -> Result<MetricReport> {
    let res = detection_eval(images, class_names.len(), cfg)?;
    let mut r = MetricReport::new("det");
    r.config.insert("iou_thresholds".into(), json!(cfg.iou_thresholds));
    r.config.insert("conf_threshold".into(), json!(cfg.conf_threshold));
    r.config.insert("coco_sweep".into(), json!(cfg.coco_sweep));
    r.config
        .insert("score".into(), json!("objectness * class confidence"));
    for t in &res.thresholds {
        let k = threshold_key(t.iou_threshold);
        r.metrics.insert(format!("map@{k}"), json!(t.map));
        r.metrics.insert(format!("mean_precision@{k}"), json!(t.mean_precision));
        r.metrics.insert(format!("mean_recall@{k}"), json!(t.mean_recall));
        let per_class: Vec<Value> = t
            .per_class
            .iter()
            .map(|c| {
                json!({
                    "class": class_names[c.class],
                    "gt": c.gt_count,
                    "ap": c.ap,
                    "precision": c.precision,
                    "recall": c.recall,
                    "tp": c.tp,
                    "fp": c.fp,
                })
            })
            .collect();
        r.metrics.insert(format!("per_class@{k}"), Value::Array(per_class));
    }
    if let Some(m) = res.map_coco {
        r.metrics.insert("map@0.50:0.95".into(), json!(m));
    }
    r.metrics.insert("images".into(), json!(images.len()));
    r.warnings = res.warnings(Some(class_names));
    Ok(r)
}

pub fn region_report(res: &RegionEvalResult) -> MetricReport {
    let mut r = MetricReport::new("region");
    r.config.insert("averaging".into(), json!("micro over images, mean over regions"));
    r.metrics.insert("average_iou".into(), json!(res.average_iou));
    r.metrics
        .insert("detected_per_image".into(), json!(res.detected_per_image));
    let per: Map<String, Value> = res
        .per_region
        .iter()
        .map(|p| (p.name.clone(), json!(p.iou)))
        .collect();
    r.metrics.insert("per_region_iou".into(), Value::Object(per));
    r.warnings = res.warnings.clone();
    r
}

pub fn expert_report(scores: &[ExpertScore], map: &RubricMap) -> Result<MetricReport> {
    let a = aggregate_expert_scores(scores, map)?;
    let mut r = MetricReport::new("expert");
    r.config.insert("rubric_map".into(), json!(map));
    r.metrics = object(serde_json::to_value(a)?);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nlg_report_records_settings() {
        let c = Corpus::from_pairs(&[("a b c", "a b c")]);
        let r = nlg_report(&c, &["bleu-4", "rouge-l"], &NlgOptions::default(), &MetricRegistry::default()).unwrap();
        assert_eq!(r.metric("bleu-4"), Some(1.0));
        assert_eq!(r.metric("rouge-l"), Some(1.0));
        assert!(r.config.contains_key("bleu-4"));
        assert!(nlg_report(&c, &["cider"], &NlgOptions::default(), &MetricRegistry::default()).is_err());
    }

    #[test]
    fn report_round_trips() {
        let m = LabelMatrix::from_rows(vec![vec![0, 0]]).unwrap();
        let r = ce_report(&m, &m, Averaging::Micro).unwrap();
        assert_eq!(r.warnings.len(), 1);
        let back: MetricReport = serde_json::from_str(&r.to_pretty_json()).unwrap();
        assert_eq!(back, r);
    }
}
