//! Toolkit-wide settings, loaded from a JSON file named by `--config` or
//! the `PARP_CONFIG` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};
use crate::geometry::{DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::ingest::DEFAULT_NEGATIVE_KEEP_FRACTION;
use crate::metrics::expert::RubricMap;
use crate::metrics::nlg::{Smoothing, DEFAULT_ROUGE_BETA};
use crate::model::{check_schema, RegionConfig, RegionVocabulary};
use crate::prompts::DEFAULT_ASSIGN_IOU;
use crate::simulate::{RegionTemplate, TemplateConfig};
use crate::squeeze::LossWeights;
use crate::taxonomy::{LesionTaxonomy, TaxonomyConfig, DEFAULT_TAIL_THRESHOLD};

pub const CONFIG_ENV: &str = "PARP_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub schema_version: Option<u32>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub assign_iou: f64,
    pub loss_weights: LossWeights,
    pub tail_threshold: f64,
    pub negative_keep_fraction: f64,
    pub smoothing: Smoothing,
    pub rouge_beta: f64,
    pub rubric_map: RubricMap,
    /// Overrides for the shipped taxonomy, region list and simulator
    /// layout. Relative paths resolve against the config file's directory.
    pub taxonomy: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub region_template: Option<PathBuf>,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            schema_version: Some(crate::model::SCHEMA_VERSION),
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            assign_iou: DEFAULT_ASSIGN_IOU,
            loss_weights: LossWeights::default(),
            tail_threshold: DEFAULT_TAIL_THRESHOLD,
            negative_keep_fraction: DEFAULT_NEGATIVE_KEEP_FRACTION,
            smoothing: Smoothing::None,
            rouge_beta: DEFAULT_ROUGE_BETA,
            rubric_map: RubricMap::default(),
            taxonomy: None,
            regions: None,
            region_template: None,
        }
    }
}

impl ToolkitConfig {
    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        check_unit("conf threshold", self.conf_threshold)?;
        check_unit("NMS IoU threshold", self.nms_iou)?;
        check_unit("assignment IoU threshold", self.assign_iou)?;
        check_unit("negative keep fraction", self.negative_keep_fraction)?;
        if !(self.tail_threshold > 0.0 && self.tail_threshold < 1.0) {
            return Err(Error::OutOfRange {
                what: "tail threshold",
                value: self.tail_threshold,
                expected: "(0, 1)",
            });
        }
        if !(self.rouge_beta.is_finite() && self.rouge_beta > 0.0) {
            return Err(Error::OutOfRange {
                what: "ROUGE beta",
                value: self.rouge_beta,
                expected: "> 0",
            });
        }
        self.loss_weights.validate()?;
        self.rubric_map.validate()
    }

    /// Reads and validates a config file, making its relative paths
    /// absolute with respect to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = crate::io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.taxonomy, &mut cfg.regions, &mut cfg.region_template]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_taxonomy(&self) -> Result<LesionTaxonomy> {
        match &self.taxonomy {
            Some(p) => LesionTaxonomy::from_config(&crate::io::read_json::<TaxonomyConfig>(p)?),
            None => Ok(LesionTaxonomy::default_chest()),
        }
    }

    pub fn load_regions(&self) -> Result<RegionVocabulary> {
        match &self.regions {
            Some(p) => RegionVocabulary::from_config(crate::io::read_json::<RegionConfig>(p)?),
            None => Ok(RegionVocabulary::chest_imagenome()),
        }
    }

    pub fn load_template(&self, vocab: &RegionVocabulary) -> Result<RegionTemplate> {
        match &self.region_template {
            Some(p) => RegionTemplate::from_config(&crate::io::read_json::<TemplateConfig>(p)?, vocab),
            None => RegionTemplate::default_chest(vocab),
        }
    }

    /// Files the config refers to, for manifest digests.
    pub fn referenced_files(&self) -> Vec<&Path> {
        [&self.taxonomy, &self.regions, &self.region_template]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ToolkitConfig::default();
        c.validate().unwrap();
        assert_eq!((c.conf_threshold, c.nms_iou, c.assign_iou), (0.35, 0.45, 0.4));
        assert_eq!(c.loss_weights, LossWeights::new(0.5, 1.0, 0.05).unwrap());
        assert_eq!(c.tail_threshold, 0.005);
    }

    #[test]
    fn partial_file_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"assign_iou": 0.5, "taxonomy": "tax.json"}"#).unwrap();
        let c = ToolkitConfig::load(&p).unwrap();
        assert_eq!(c.assign_iou, 0.5);
        assert_eq!(c.conf_threshold, 0.35);
        assert_eq!(c.taxonomy.unwrap(), dir.path().join("tax.json"));

        std::fs::write(&p, r#"{"assign_iou": 1.5}"#).unwrap();
        assert!(ToolkitConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"unknown": 1}"#).unwrap();
        assert!(ToolkitConfig::load(&p).is_err());
    }

    #[test]
    fn shipped_taxonomy_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let t = LesionTaxonomy::default_chest();
        let tp = dir.path().join("tax.json");
        crate::io::write_json_pretty(&tp, &t.to_config()).unwrap();
        let c = ToolkitConfig {
            taxonomy: Some(tp),
            ..Default::default()
        };
        assert_eq!(c.load_taxonomy().unwrap(), t);
    }
}
