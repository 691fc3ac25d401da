//! Shared domain types: boxes, the anatomical region vocabulary, per-image
//! scene graphs and detector outputs, plus their on-disk record forms.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};
use crate::geometry::ScoredBox;
use crate::taxonomy::LesionTaxonomy;

/// Number of anatomical regions; also the prompt length.
pub const REGION_COUNT: usize = 29;

pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_REGIONS: &str = include_str!("../config/regions.json");

/// Corner-form box `(x1, y1, x2, y2)` in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBoxXyxy {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let raw = [x1, y1, x2, y2];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedBox(raw, "non-finite coordinate"));
        }
        if raw.iter().any(|&v| v < 0.0) {
            return Err(Error::MalformedBox(raw, "negative coordinate"));
        }
        if x1 >= x2 {
            return Err(Error::MalformedBox(raw, "x1 >= x2"));
        }
        if y1 >= y2 {
            return Err(Error::MalformedBox(raw, "y1 >= y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(raw: [f64; 4]) -> Result<Self> {
        Self::new(raw[0], raw[1], raw[2], raw[3])
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_xywh(&self) -> BBoxXywh {
        BBoxXywh {
            x: (self.x1 + self.x2) / 2.0,
            y: (self.y1 + self.y2) / 2.0,
            w: self.width(),
            h: self.height(),
        }
    }

    /// Area of the overlap with `other`; zero when the interiors are disjoint.
    pub fn intersection_area(&self, other: &BBoxXyxy) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Center-form box `(x, y, w, h)`, the layout of single-label annotation rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBoxXywh {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBoxXywh {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let raw = [x, y, w, h];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedBox(raw, "non-finite coordinate"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::MalformedBox(raw, "non-positive extent"));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_array(raw: [f64; 4]) -> Result<Self> {
        Self::new(raw[0], raw[1], raw[2], raw[3])
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Fails when a corner would land at a negative coordinate.
    pub fn to_xyxy(&self) -> Result<BBoxXyxy> {
        BBoxXyxy::new(
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }
}

/// The ordered anatomical region list. Index `k` is prompt slot `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionConfig {
    #[serde(default)]
    pub schema_version: Option<u32>,
    #[serde(default)]
    pub source: Option<String>,
    pub regions: Vec<String>,
}

impl RegionVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != REGION_COUNT {
            return Err(Error::InvalidVocabulary(format!(
                "expected {REGION_COUNT} regions, got {}",
                names.len()
            )));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate region {n:?}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn from_config(cfg: RegionConfig) -> Result<Self> {
        check_schema(cfg.schema_version)?;
        Self::new(cfg.regions)
    }

    /// The shipped Chest ImaGenome region list.
    pub fn chest_imagenome() -> Self {
        let cfg: RegionConfig =
            serde_json::from_str(DEFAULT_REGIONS).expect("shipped region config parses");
        Self::from_config(cfg).expect("shipped region config is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn resolve(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }
}

pub(crate) fn check_schema(version: Option<u32>) -> Result<()> {
    match version {
        None | Some(SCHEMA_VERSION) => Ok(()),
        Some(v) => Err(Error::SchemaVersion(v)),
    }
}

/// Lesion class indices, kept sorted.
pub type ClassSet = BTreeSet<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEntry {
    pub region: usize,
    pub bbox: BBoxXyxy,
    pub lesions: ClassSet,
}

/// Validated per-image ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub image_id: String,
    pub regions: Vec<RegionEntry>,
}

impl SceneGraph {
    pub fn region(&self, region: usize) -> Option<&RegionEntry> {
        self.regions.iter().find(|r| r.region == region)
    }

    pub fn is_negative(&self) -> bool {
        self.regions.iter().all(|r| r.lesions.is_empty())
    }

    pub fn to_record(&self, vocab: &RegionVocabulary, taxonomy: &LesionTaxonomy) -> SceneGraphRecord {
        SceneGraphRecord {
            schema_version: Some(SCHEMA_VERSION),
            image_id: self.image_id.clone(),
            regions: self
                .regions
                .iter()
                .map(|r| RawRegion {
                    name: vocab.name(r.region).to_string(),
                    bbox: r.bbox.to_array(),
                    lesions: r
                        .lesions
                        .iter()
                        .map(|&c| taxonomy.name(c).to_string())
                        .collect(),
                })
                .collect(),
            findings: None,
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRegion {
    pub name: String,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub lesions: Vec<String>,
}

/// One line of a scene-graph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraphRecord {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub image_id: String,
    pub regions: Vec<RawRegion>,
    /// Report findings text; used by ingestion filtering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

pub fn validate_scene_graph(
    raw: &SceneGraphRecord,
    vocab: &RegionVocabulary,
    taxonomy: &LesionTaxonomy,
) -> Result<SceneGraph> {
    check_schema(raw.schema_version)?;
    if raw.regions.len() > REGION_COUNT {
        return Err(Error::TooManyRegions {
            image_id: raw.image_id.clone(),
            count: raw.regions.len(),
            max: REGION_COUNT,
        });
    }
    let mut seen = BTreeSet::new();
    let mut regions = Vec::with_capacity(raw.regions.len());
    for entry in &raw.regions {
        let region = vocab.resolve(&entry.name)?;
        if !seen.insert(region) {
            return Err(Error::DuplicateRegion {
                image_id: raw.image_id.clone(),
                region: entry.name.clone(),
            });
        }
        let bbox = BBoxXyxy::from_array(entry.bbox)?;
        let lesions = entry
            .lesions
            .iter()
            .map(|l| taxonomy.resolve(l))
            .collect::<Result<ClassSet>>()?;
        regions.push(RegionEntry {
            region,
            bbox,
            lesions,
        });
    }
    Ok(SceneGraph {
        image_id: raw.image_id.clone(),
        regions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDetection {
    pub region: usize,
    pub bbox: BBoxXyxy,
    pub score: f64,
}

/// Outputs of the region and lesion detectors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image_id: String,
    pub region_detections: Vec<RegionDetection>,
    pub lesion_detections: Vec<ScoredBox>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFormat {
    #[default]
    Xyxy,
    Xywh,
}

impl BoxFormat {
    fn is_xyxy(&self) -> bool {
        *self == BoxFormat::Xyxy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRegionDetection {
    pub name: String,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLesionDetection {
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "BoxFormat::is_xyxy")]
    pub format: BoxFormat,
    pub objectness: f64,
    pub class_conf: BTreeMap<String, f64>,
}

/// One line of a detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub image_id: String,
    #[serde(default)]
    pub region_detections: Vec<RawRegionDetection>,
    #[serde(default)]
    pub lesion_detections: Vec<RawLesionDetection>,
}

pub fn validate_detections(
    raw: &DetectionRecord,
    vocab: &RegionVocabulary,
    taxonomy: &LesionTaxonomy,
) -> Result<DetectionSet> {
    check_schema(raw.schema_version)?;
    let mut seen = BTreeSet::new();
    let mut region_detections = Vec::with_capacity(raw.region_detections.len());
    for d in &raw.region_detections {
        let region = vocab.resolve(&d.name)?;
        if !seen.insert(region) {
            return Err(Error::DuplicateRegion {
                image_id: raw.image_id.clone(),
                region: d.name.clone(),
            });
        }
        check_unit("region score", d.score)?;
        region_detections.push(RegionDetection {
            region,
            bbox: BBoxXyxy::from_array(d.bbox)?,
            score: d.score,
        });
    }
    let mut lesion_detections = Vec::with_capacity(raw.lesion_detections.len());
    for d in &raw.lesion_detections {
        let bbox = match d.format {
            BoxFormat::Xyxy => BBoxXyxy::from_array(d.bbox)?,
            BoxFormat::Xywh => BBoxXywh::from_array(d.bbox)?.to_xyxy()?,
        };
        let mut conf = vec![0.0; taxonomy.len()];
        for (name, &c) in &d.class_conf {
            conf[taxonomy.resolve(name)?] = c;
        }
        lesion_detections.push(ScoredBox::new(bbox, d.objectness, conf)?);
    }
    Ok(DetectionSet {
        image_id: raw.image_id.clone(),
        region_detections,
        lesion_detections,
    })
}

impl DetectionSet {
    pub fn to_record(&self, vocab: &RegionVocabulary, taxonomy: &LesionTaxonomy) -> DetectionRecord {
        DetectionRecord {
            schema_version: Some(SCHEMA_VERSION),
            image_id: self.image_id.clone(),
            region_detections: self
                .region_detections
                .iter()
                .map(|d| RawRegionDetection {
                    name: vocab.name(d.region).to_string(),
                    bbox: d.bbox.to_array(),
                    score: d.score,
                })
                .collect(),
            lesion_detections: self
                .lesion_detections
                .iter()
                .map(|b| RawLesionDetection {
                    bbox: b.bbox.to_array(),
                    format: BoxFormat::Xyxy,
                    objectness: b.objectness,
                    class_conf: b
                        .class_conf
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0.0)
                        .map(|(i, &c)| (taxonomy.name(i).to_string(), c))
                        .collect(),
                })
                .collect(),
        }
    }
}
