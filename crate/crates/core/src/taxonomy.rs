//! Lesion class hierarchy and the class-reduction steps: long-tail filtering
//! and removal of the redundant root label.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_schema, ClassSet, SceneGraphRecord};

const DEFAULT_TAXONOMY: &str = include_str!("../config/taxonomy.json");

/// Fraction of training labels below which a class is treated as tail.
pub const DEFAULT_TAIL_THRESHOLD: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLevel {
    Root,
    Second,
    Third,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub level: ClassLevel,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyConfig {
    #[serde(default)]
    pub schema_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_note: Option<String>,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq)]
struct LesionClass {
    name: String,
    level: ClassLevel,
    parent: Option<usize>,
    frequency: f64,
}

/// Reduced lesion vocabulary with its parent links and training frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionTaxonomy {
    classes: Vec<LesionClass>,
    index: HashMap<String, usize>,
    root: usize,
}

impl LesionTaxonomy {
    pub fn from_config(cfg: &TaxonomyConfig) -> Result<Self> {
        check_schema(cfg.schema_version)?;
        if cfg.classes.is_empty() {
            return Err(Error::InvalidTaxonomy("no classes".into()));
        }
        let mut index = HashMap::new();
        for (i, c) in cfg.classes.iter().enumerate() {
            if index.insert(c.name.clone(), i).is_some() {
                return Err(Error::InvalidTaxonomy(format!("duplicate class {:?}", c.name)));
            }
        }
        let roots: Vec<usize> = cfg
            .classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.level == ClassLevel::Root)
            .map(|(i, _)| i)
            .collect();
        let root = match roots.as_slice() {
            [r] => *r,
            _ => {
                return Err(Error::InvalidTaxonomy(format!(
                    "expected exactly one root class, found {}",
                    roots.len()
                )))
            }
        };
        let mut classes = Vec::with_capacity(cfg.classes.len());
        for c in &cfg.classes {
            if !(c.frequency.is_finite() && c.frequency >= 0.0) {
                return Err(Error::InvalidTaxonomy(format!(
                    "class {:?} has invalid frequency {}",
                    c.name, c.frequency
                )));
            }
            let parent = match &c.parent {
                None => None,
                Some(p) => Some(*index.get(p).ok_or_else(|| {
                    Error::InvalidTaxonomy(format!("class {:?} has unknown parent {p:?}", c.name))
                })?),
            };
            let parent_level = parent.map(|p| cfg.classes[p].level);
            let ok = match c.level {
                ClassLevel::Root | ClassLevel::Independent => parent.is_none(),
                ClassLevel::Second => parent == Some(root),
                ClassLevel::Third => parent_level == Some(ClassLevel::Second),
            };
            if !ok {
                return Err(Error::InvalidTaxonomy(format!(
                    "class {:?}: level {:?} inconsistent with parent {:?}",
                    c.name, c.level, c.parent
                )));
            }
            classes.push(LesionClass {
                name: c.name.clone(),
                level: c.level,
                parent,
                frequency: c.frequency,
            });
        }
        Ok(Self {
            classes,
            index,
            root,
        })
    }

    /// The shipped 21-class chest lesion taxonomy.
    pub fn default_chest() -> Self {
        let cfg: TaxonomyConfig =
            serde_json::from_str(DEFAULT_TAXONOMY).expect("shipped taxonomy parses");
        Self::from_config(&cfg).expect("shipped taxonomy is valid")
    }

    pub fn to_config(&self) -> TaxonomyConfig {
        TaxonomyConfig {
            schema_version: Some(crate::model::SCHEMA_VERSION),
            frequency_note: None,
            classes: self
                .classes
                .iter()
                .map(|c| ClassSpec {
                    name: c.name.clone(),
                    level: c.level,
                    parent: c.parent.map(|p| self.classes[p].name.clone()),
                    frequency: c.frequency,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn resolve(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownLesion(name.to_string()))
    }

    pub fn level(&self, class: usize) -> ClassLevel {
        self.classes[class].level
    }

    pub fn parent(&self, class: usize) -> Option<usize> {
        self.classes[class].parent
    }

    pub fn frequency(&self, class: usize) -> f64 {
        self.classes[class].frequency
    }

    /// Classes at a given level, in index order.
    pub fn classes_at(&self, level: ClassLevel) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.level(c) == level).collect()
    }

    /// Children of `class`, in index order.
    pub fn children(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&c| self.parent(c) == Some(class))
            .collect()
    }

    /// Replaces frequencies with `count / total` from observed label counts;
    /// classes absent from `stats` get frequency zero.
    pub fn with_frequencies(&self, stats: &RawLabelStats) -> Result<Self> {
        let total = stats.total();
        if total == 0 {
            return Err(Error::EmptyInput("label statistics"));
        }
        let mut out = self.clone();
        for c in &mut out.classes {
            c.frequency = stats.count(&c.name) as f64 / total as f64;
        }
        Ok(out)
    }

    /// The class together with every ancestor up to the root.
    pub fn with_ancestors(&self, class: usize) -> ClassSet {
        let mut out = ClassSet::new();
        let mut cur = Some(class);
        while let Some(c) = cur {
            out.insert(c);
            cur = self.parent(c);
        }
        out
    }
}

pub fn classify_level(taxonomy: &LesionTaxonomy, class: usize) -> Result<ClassLevel> {
    if class < taxonomy.len() {
        Ok(taxonomy.level(class))
    } else {
        Err(Error::UnknownClassIndex(class))
    }
}

/// Drops the root from a region's label set when any third-level class is
/// present; every other member is kept.
pub fn remove_root_redundancy(taxonomy: &LesionTaxonomy, labels: &ClassSet) -> ClassSet {
    let has_third = labels
        .iter()
        .any(|&c| taxonomy.level(c) == ClassLevel::Third);
    if has_third {
        labels
            .iter()
            .copied()
            .filter(|&c| c != taxonomy.root())
            .collect()
    } else {
        labels.clone()
    }
}

/// Per-class label counts over a training corpus, keyed by class name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawLabelStats {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub counts: BTreeMap<String, u64>,
}

impl RawLabelStats {
    pub fn new(counts: impl IntoIterator<Item = (String, u64)>) -> Self {
        Self {
            schema_version: Some(crate::model::SCHEMA_VERSION),
            counts: counts.into_iter().collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn count(&self, name: &str) -> u64 {
        self.counts.get(name).copied().unwrap_or(0)
    }

    /// Counts one label per (region, lesion) occurrence. Names are not
    /// checked against any taxonomy, so the original wider vocabulary works.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SceneGraphRecord>) -> Self {
        let mut counts = BTreeMap::new();
        for rec in records {
            for region in &rec.regions {
                for l in &region.lesions {
                    *counts.entry(l.clone()).or_insert(0) += 1;
                }
            }
        }
        Self::new(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassFraction {
    pub name: String,
    pub count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFilterResult {
    pub threshold: f64,
    pub total: u64,
    /// Sorted by descending count, then name.
    pub retained: Vec<ClassFraction>,
    pub removed: Vec<ClassFraction>,
}

impl TailFilterResult {
    pub fn retained_names(&self) -> Vec<&str> {
        self.retained.iter().map(|c| c.name.as_str()).collect()
    }
}

/// Keeps the classes whose share of all labels is at least `threshold`.
pub fn filter_tail_classes(stats: &RawLabelStats, threshold: f64) -> Result<TailFilterResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::OutOfRange {
            what: "tail threshold",
            value: threshold,
            expected: "(0, 1)",
        });
    }
    let total = stats.total();
    if total == 0 {
        return Err(Error::EmptyInput("label statistics"));
    }
    let mut all: Vec<ClassFraction> = stats
        .counts
        .iter()
        .map(|(name, &count)| ClassFraction {
            name: name.clone(),
            count,
            fraction: count as f64 / total as f64,
        })
        .collect();
    all.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.name.cmp(&b.name)));
    let (retained, removed) = all.into_iter().partition(|c| c.fraction >= threshold);
    Ok(TailFilterResult {
        threshold,
        total,
        retained,
        removed,
    })
}
