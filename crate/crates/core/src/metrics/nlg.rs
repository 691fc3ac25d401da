//! Corpus text-similarity metrics: BLEU-n, ROUGE-L and a self-contained
//! METEOR variant (exact and stem matching, no synonym stage).
//!
//! Every metric sits behind [`TextMetric`] and is built by name from a
//! [`MetricRegistry`], so the CLI can select metrics at runtime.

use std::collections::{BTreeMap, HashMap, HashSet};

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: String,
    pub candidate: String,
    pub reference: String,
}

/// One line of a report file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub image_id: String,
    pub report: String,
}

/// Candidate/reference report pairs with unique image ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.image_id.as_str()) {
                return Err(Error::DuplicateId(s.image_id.clone()));
            }
        }
        Ok(Self { samples })
    }

    /// Pairs from plain strings, ids numbered from zero.
    pub fn from_pairs<C: AsRef<str>, R: AsRef<str>>(pairs: &[(C, R)]) -> Self {
        Self {
            samples: pairs
                .iter()
                .enumerate()
                .map(|(i, (c, r))| Sample {
                    image_id: i.to_string(),
                    candidate: c.as_ref().to_string(),
                    reference: r.as_ref().to_string(),
                })
                .collect(),
        }
    }

    /// Pairs candidates with references by image id, in reference order.
    /// Every reference needs a candidate; extra candidates are an error too.
    pub fn from_records(candidates: &[ReportRecord], references: &[ReportRecord]) -> Result<Self> {
        let mut by_id: HashMap<&str, &str> = HashMap::new();
        for c in candidates {
            if by_id.insert(&c.image_id, &c.report).is_some() {
                return Err(Error::DuplicateId(c.image_id.clone()));
            }
        }
        if candidates.len() != references.len() {
            return Err(Error::LengthMismatch {
                what: "report files",
                left: candidates.len(),
                right: references.len(),
            });
        }
        let samples = references
            .iter()
            .map(|r| {
                let c = by_id.get(r.image_id.as_str()).ok_or_else(|| Error::Schema {
                    path: "candidate reports".into(),
                    line: 0,
                    message: format!("missing image {:?}", r.image_id),
                })?;
                Ok(Sample {
                    image_id: r.image_id.clone(),
                    candidate: c.to_string(),
                    reference: r.report.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::EmptyCorpus)
        } else {
            Ok(())
        }
    }
}

/// Lowercases and splits on whitespace; each punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// Add one to matched and total counts for orders above one.
    AddOne,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram totals for orders `1..=max_n`.
fn corpus_ngram_stats(corpus: &Corpus, max_n: usize) -> (Vec<usize>, Vec<usize>, usize, usize) {
    let mut matched = vec![0; max_n];
    let mut total = vec![0; max_n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for s in corpus.samples() {
        let c = tokenize(&s.candidate);
        let r = tokenize(&s.reference);
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            matched[n - 1] += cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    (matched, total, cand_len, ref_len)
}

pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Corpus-level BLEU with uniform weights over orders `1..=n`.
///
/// An order for which no candidate in the corpus has any n-gram is skipped,
/// so a corpus of identical short texts still scores 1.
pub fn bleu_n(corpus: &Corpus, n: usize, smoothing: Smoothing) -> Result<f64> {
    corpus.require_nonempty()?;
    if !(1..=4).contains(&n) {
        return Err(Error::OutOfRange {
            what: "BLEU order",
            value: n as f64,
            expected: "1..=4",
        });
    }
    let (matched, total, cand_len, ref_len) = corpus_ngram_stats(corpus, n);
    let bp = brevity_penalty(cand_len, ref_len);
    if bp == 0.0 {
        return Ok(0.0);
    }
    // Orders longer than every candidate have no n-grams at all; they are
    // left out of the mean instead of zeroing the score.
    let mut log_sum = 0.0;
    let mut orders = 0;
    for k in (0..n).filter(|&k| total[k] > 0) {
        let (m, t) = match smoothing {
            Smoothing::AddOne if k > 0 => (matched[k] + 1, total[k] + 1),
            _ => (matched[k], total[k]),
        };
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
        orders += 1;
    }
    Ok(bp * (log_sum / orders as f64).exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Recall weight used by ROUGE-L's F-measure.
pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

pub fn rouge_l_sentence(candidate: &str, reference: &str, beta: f64) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean per-sample ROUGE-L F-measure.
pub fn rouge_l(corpus: &Corpus, beta: f64) -> Result<f64> {
    corpus.require_nonempty()?;
    let sum: f64 = corpus
        .samples()
        .iter()
        .map(|s| rouge_l_sentence(&s.candidate, &s.reference, beta))
        .sum();
    Ok(sum / corpus.len() as f64)
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Candidate/reference index pairs, sorted by candidate index.
fn meteor_align(cand: &[String], reference: &[String], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let cand_stems: Vec<String> = cand.iter().map(|t| stemmer.stem(t).into_owned()).collect();
    let ref_stems: Vec<String> = reference.iter().map(|t| stemmer.stem(t).into_owned()).collect();
    let mut cand_to_ref: Vec<Option<usize>> = vec![None; cand.len()];
    let mut ref_used = vec![false; reference.len()];

    let stages: [(&[String], &[String]); 2] = [(cand, reference), (&cand_stems, &ref_stems)];
    for (cs, rs) in stages {
        for i in 0..cand.len() {
            if cand_to_ref[i].is_some() {
                continue;
            }
            let free = |j: usize| !ref_used[j] && cs[i] == rs[j];
            // continue the previous candidate's chunk when possible
            let follow = i
                .checked_sub(1)
                .and_then(|p| cand_to_ref[p])
                .map(|j| j + 1)
                .filter(|&j| j < reference.len() && free(j));
            if let Some(j) = follow.or_else(|| (0..reference.len()).find(|&j| free(j))) {
                cand_to_ref[i] = Some(j);
                ref_used[j] = true;
            }
        }
    }
    cand_to_ref
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect()
}

fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    alignment
        .iter()
        .enumerate()
        .filter(|(k, (i, j))| *k == 0 || {
            let (pi, pj) = alignment[k - 1];
            pi + 1 != *i || pj + 1 != *j
        })
        .count()
}

pub fn meteor_sentence(candidate: &str, reference: &str, stemmer: &Stemmer) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let alignment = meteor_align(&c, &r, stemmer);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
    let frag = count_chunks(&alignment) as f64 / m as f64;
    let penalty = METEOR_GAMMA * frag.powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// Mean per-sample METEOR variant score.
pub fn meteor_variant(corpus: &Corpus) -> Result<f64> {
    corpus.require_nonempty()?;
    let stemmer = Stemmer::create(Algorithm::English);
    let sum: f64 = corpus
        .samples()
        .iter()
        .map(|s| meteor_sentence(&s.candidate, &s.reference, &stemmer))
        .sum();
    Ok(sum / corpus.len() as f64)
}

/// A corpus-level text metric selectable by name.
pub trait TextMetric: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, corpus: &Corpus) -> Result<f64>;
    /// Settings that affect the value, echoed into reports.
    fn settings(&self) -> serde_json::Value;
}

struct Bleu {
    name: String,
    n: usize,
    smoothing: Smoothing,
}

impl TextMetric for Bleu {
    fn name(&self) -> &str {
        &self.name
    }
    fn score(&self, corpus: &Corpus) -> Result<f64> {
        bleu_n(corpus, self.n, self.smoothing)
    }
    fn settings(&self) -> serde_json::Value {
        json!({ "max_order": self.n, "smoothing": self.smoothing, "weights": "uniform" })
    }
}

struct RougeL {
    beta: f64,
}

impl TextMetric for RougeL {
    fn name(&self) -> &str {
        "rouge-l"
    }
    fn score(&self, corpus: &Corpus) -> Result<f64> {
        rouge_l(corpus, self.beta)
    }
    fn settings(&self) -> serde_json::Value {
        json!({ "beta": self.beta, "averaging": "mean over samples" })
    }
}

struct MeteorVariant;

impl TextMetric for MeteorVariant {
    fn name(&self) -> &str {
        "meteor-variant"
    }
    fn score(&self, corpus: &Corpus) -> Result<f64> {
        meteor_variant(corpus)
    }
    fn settings(&self) -> serde_json::Value {
        json!({
            "stages": ["exact", "stem"],
            "alpha": METEOR_ALPHA,
            "beta": METEOR_BETA,
            "gamma": METEOR_GAMMA,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlgOptions {
    pub smoothing: Smoothing,
    pub rouge_beta: f64,
}

impl Default for NlgOptions {
    fn default() -> Self {
        Self {
            smoothing: Smoothing::None,
            rouge_beta: DEFAULT_ROUGE_BETA,
        }
    }
}

pub type MetricConstructor = Box<dyn Fn(&NlgOptions) -> Box<dyn TextMetric> + Send + Sync>;

/// Name → constructor table for text metrics.
pub struct MetricRegistry {
    constructors: BTreeMap<String, MetricConstructor>,
}

impl std::fmt::Debug for MetricRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricRegistry")
            .field("names", &self.names())
            .finish()
    }
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        for n in 1..=4 {
            reg.register(format!("bleu-{n}"), move |o: &NlgOptions| {
                Box::new(Bleu {
                    name: format!("bleu-{n}"),
                    n,
                    smoothing: o.smoothing,
                }) as Box<dyn TextMetric>
            });
        }
        reg.register("rouge-l", |o: &NlgOptions| {
            Box::new(RougeL { beta: o.rouge_beta }) as Box<dyn TextMetric>
        });
        reg.register("meteor-variant", |_: &NlgOptions| {
            Box::new(MeteorVariant) as Box<dyn TextMetric>
        });
        reg
    }
}

impl MetricRegistry {
    pub fn empty() -> Self {
        Self {
            constructors: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: impl Into<String>, ctor: F)
    where
        F: Fn(&NlgOptions) -> Box<dyn TextMetric> + Send + Sync + 'static,
    {
        self.constructors.insert(name.into(), Box::new(ctor));
    }

    pub fn names(&self) -> Vec<&str> {
        self.constructors.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, opts: &NlgOptions) -> Result<Box<dyn TextMetric>> {
        self.constructors
            .get(name)
            .map(|c| c(opts))
            .ok_or_else(|| Error::UnknownMetric(name.to_string()))
    }
}

/// The metrics reported by default, in report order.
pub const DEFAULT_METRICS: [&str; 6] = [
    "bleu-1",
    "bleu-2",
    "bleu-3",
    "bleu-4",
    "meteor-variant",
    "rouge-l",
];
