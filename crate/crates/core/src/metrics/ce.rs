//! Clinical-efficacy precision/recall/F1 from binary observation matrices.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations per report produced by the usual chest X-ray labeler.
pub const CHEXPERT_OBSERVATIONS: usize = 14;

/// Per-image binary observation vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    ids: Vec<String>,
    rows: Vec<Vec<u8>>,
    width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub image_id: String,
    pub labels: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(records: Vec<LabelRecord>) -> Result<Self> {
        let width = records.first().map_or(0, |r| r.labels.len());
        let mut seen = HashMap::new();
        let mut ids = Vec::with_capacity(records.len());
        let mut rows = Vec::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            crate::model::check_schema(r.schema_version)?;
            if seen.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.image_id));
            }
            if r.labels.len() != width {
                return Err(Error::LengthMismatch {
                    what: "label row width",
                    left: r.labels.len(),
                    right: width,
                });
            }
            if let Some(&bad) = r.labels.iter().find(|&&v| v > 1) {
                return Err(Error::OutOfRange {
                    what: "label value",
                    value: bad as f64,
                    expected: "0 or 1",
                });
            }
            ids.push(r.image_id);
            rows.push(r.labels);
        }
        Ok(Self { ids, rows, width })
    }

    /// Rows with ids numbered from zero.
    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        Self::new(
            rows.into_iter()
                .enumerate()
                .map(|(i, labels)| LabelRecord {
                    schema_version: None,
                    image_id: i.to_string(),
                    labels,
                })
                .collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn row(&self, id: &str) -> Option<&[u8]> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|p| self.rows[p].as_slice())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Pool every (image, observation) cell.
    #[default]
    Micro,
    /// Average per-observation scores.
    Macro,
    /// Average per-image scores.
    Example,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CeResult {
    pub averaging: Averaging,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// True when some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl Counts {
    fn add(&mut self, cand: u8, reference: u8) {
        match (cand, reference) {
            (1, 1) => self.tp += 1,
            (1, 0) => self.fp += 1,
            (0, 1) => self.fn_ += 1,
            _ => {}
        }
    }

    /// (precision, recall, f1, undefined)
    fn prf(&self) -> (f64, f64, f64, bool) {
        let mut undefined = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                undefined = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 {
            undefined = true;
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f1, undefined)
    }
}

/// Pairs rows by image id; both matrices must cover the same ids.
pub fn ce_metrics(candidate: &LabelMatrix, reference: &LabelMatrix, averaging: Averaging) -> Result<CeResult> {
    if candidate.len() != reference.len() {
        return Err(Error::LengthMismatch {
            what: "label matrix rows",
            left: candidate.len(),
            right: reference.len(),
        });
    }
    if candidate.width != reference.width && !candidate.is_empty() {
        return Err(Error::LengthMismatch {
            what: "label matrix width",
            left: candidate.width,
            right: reference.width,
        });
    }
    let mut pairs = Vec::with_capacity(candidate.len());
    for (id, row) in reference.ids.iter().zip(&reference.rows) {
        let c = candidate.row(id).ok_or_else(|| Error::Schema {
            path: "candidate labels".into(),
            line: 0,
            message: format!("missing image {id:?}"),
        })?;
        pairs.push((c, row.as_slice()));
    }

    let mut total = Counts::default();
    for (c, r) in &pairs {
        for (&a, &b) in c.iter().zip(r.iter()) {
            total.add(a, b);
        }
    }

    let (precision, recall, f1, undefined) = match averaging {
        Averaging::Micro => total.prf(),
        Averaging::Macro => {
            let groups: Vec<Counts> = (0..reference.width)
                .map(|j| {
                    let mut k = Counts::default();
                    for (c, r) in &pairs {
                        k.add(c[j], r[j]);
                    }
                    k
                })
                .collect();
            mean_prf(&groups)
        }
        Averaging::Example => {
            let groups: Vec<Counts> = pairs
                .iter()
                .map(|(c, r)| {
                    let mut k = Counts::default();
                    for (&a, &b) in c.iter().zip(r.iter()) {
                        k.add(a, b);
                    }
                    k
                })
                .collect();
            mean_prf(&groups)
        }
    };
    Ok(CeResult {
        averaging,
        precision,
        recall,
        f1,
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        undefined,
    })
}

fn mean_prf(groups: &[Counts]) -> (f64, f64, f64, bool) {
    if groups.is_empty() {
        return (0.0, 0.0, 0.0, true);
    }
    let n = groups.len() as f64;
    let (mut p, mut r, mut f, mut u) = (0.0, 0.0, 0.0, false);
    for g in groups {
        let (gp, gr, gf, gu) = g.prf();
        p += gp;
        r += gr;
        f += gf;
        u |= gu;
    }
    (p / n, r / n, f / n, u)
}
