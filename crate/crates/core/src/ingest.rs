//! Dataset filtering: drop records without findings text and keep a fixed
//! share of negative (lesion-free) images.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_unit, Error, Result};
use crate::metrics::reference::SPLIT_SIZES;
use crate::model::{validate_scene_graph, RegionVocabulary, SceneGraphRecord};
use crate::taxonomy::LesionTaxonomy;

pub const DEFAULT_NEGATIVE_KEEP_FRACTION: f64 = 0.12;

const UNASSIGNED: &str = "unassigned";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub require_findings: bool,
    pub negative_keep_fraction: f64,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            require_findings: true,
            negative_keep_fraction: DEFAULT_NEGATIVE_KEEP_FRACTION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestCounts {
    pub input: usize,
    pub missing_findings: usize,
    pub negatives: usize,
    pub negatives_kept: usize,
    pub positives: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestResult {
    /// Retained records in input order, with `split` filled from the split
    /// map when one was given.
    pub records: Vec<SceneGraphRecord>,
    pub total: IngestCounts,
    pub per_split: BTreeMap<String, IngestCounts>,
    pub warnings: Vec<String>,
}

/// Ordering key for negative subsampling; independent of file order.
pub fn negative_rank_key(seed: u64, image_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    h.finalize().into()
}

/// `floor(fraction * n)`, robust to fractions like 0.12 that are not exact
/// in binary.
pub fn keep_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Filters the whole collection at once: the keep fraction applies to all
/// negatives, not separately per split.
pub fn ingest_dataset(
    records: Vec<SceneGraphRecord>,
    vocab: &RegionVocabulary,
    taxonomy: &LesionTaxonomy,
    opts: &IngestOptions,
    splits: Option<&BTreeMap<String, String>>,
) -> Result<IngestResult> {
    check_unit("negative keep fraction", opts.negative_keep_fraction)?;
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let mut total = IngestCounts::default();
    let mut per_split: BTreeMap<String, IngestCounts> = BTreeMap::new();

    let mut candidates = Vec::new();
    for mut rec in records {
        if !seen.insert(rec.image_id.clone()) {
            return Err(Error::DuplicateId(rec.image_id));
        }
        let negative = validate_scene_graph(&rec, vocab, taxonomy)?.is_negative();
        if let Some(map) = splits {
            if let Some(s) = map.get(&rec.image_id) {
                rec.split = Some(s.clone());
            }
        }
        let split = rec.split.clone().unwrap_or_else(|| UNASSIGNED.to_string());
        let c = per_split.entry(split).or_default();
        c.input += 1;
        total.input += 1;
        if opts.require_findings && rec.findings.is_none() {
            c.missing_findings += 1;
            total.missing_findings += 1;
            continue;
        }
        if negative {
            c.negatives += 1;
            total.negatives += 1;
        } else {
            c.positives += 1;
            total.positives += 1;
        }
        candidates.push((rec, negative));
    }

    let mut negatives: Vec<(usize, [u8; 32])> = candidates
        .iter()
        .enumerate()
        .filter(|(_, (_, neg))| *neg)
        .map(|(i, (r, _))| (i, negative_rank_key(opts.seed, &r.image_id)))
        .collect();
    negatives.sort_by_key(|n| n.1);
    let keep = keep_count(opts.negative_keep_fraction, negatives.len());
    let kept: HashSet<usize> = negatives[..keep].iter().map(|(i, _)| *i).collect();

    let mut out = Vec::new();
    for (i, (rec, negative)) in candidates.into_iter().enumerate() {
        if negative && !kept.contains(&i) {
            continue;
        }
        let split = rec.split.clone().unwrap_or_else(|| UNASSIGNED.to_string());
        let c = per_split.get_mut(&split).expect("split counted above");
        if negative {
            c.negatives_kept += 1;
            total.negatives_kept += 1;
        }
        c.retained += 1;
        total.retained += 1;
        out.push(rec);
    }

    if let Some(map) = splits {
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for s in map.values() {
            *sizes.entry(s.as_str()).or_default() += 1;
        }
        for (name, expected) in SPLIT_SIZES {
            let got = sizes.get(name).copied().unwrap_or(0);
            if got != expected {
                warnings.push(format!(
                    "split file lists {got} {name} ids; the published split has {expected}"
                ));
            }
        }
    }

    Ok(IngestResult {
        records: out,
        total,
        per_split,
        warnings,
    })
}

/// Reads a split file: JSON Lines `{"image_id": ..., "split": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub image_id: String,
    pub split: String,
}

pub fn split_map(records: Vec<SplitRecord>) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for r in records {
        if map.insert(r.image_id.clone(), r.split).is_some() {
            return Err(Error::DuplicateId(r.image_id));
        }
    }
    Ok(map)
}
