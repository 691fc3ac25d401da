use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed bbox {0:?}: {1}")]
    MalformedBox([f64; 4], &'static str),

    #[error("unknown region {0:?}")]
    UnknownRegion(String),

    #[error("unknown lesion {0:?}")]
    UnknownLesion(String),

    #[error("unknown class index {0}")]
    UnknownClassIndex(usize),

    #[error("duplicate region {region:?} in image {image_id:?}")]
    DuplicateRegion { image_id: String, region: String },

    #[error("image {image_id:?} has {count} region entries, at most {max} allowed")]
    TooManyRegions {
        image_id: String,
        count: usize,
        max: usize,
    },

    #[error("{what} out of range: {value} (expected {expected})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),

    #[error("invalid region vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("unknown grade symbol {0:?}")]
    UnknownGrade(String),

    #[error("unknown metric {0:?}")]
    UnknownMetric(String),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unsupported schema_version {0} (expected 1)")]
    SchemaVersion(u32),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_unit(what: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what,
            value,
            expected: "[0, 1]",
        })
    }
}
