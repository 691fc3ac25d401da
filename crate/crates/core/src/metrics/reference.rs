//! Published figures for the trained system on MIMIC-CXR with Chest
//! ImaGenome annotations. They need the trained detectors and the full
//! dataset, so nothing here is reproduced by this crate; they are kept as
//! fixtures to compare report layouts against.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedReportScores {
    pub bleu_1: f64,
    pub ce_f1: f64,
}

pub const REPORT_SCORES: PublishedReportScores = PublishedReportScores {
    bleu_1: 0.394,
    ce_f1: 0.470,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedRegionScores {
    pub average_iou: f64,
    pub regions_per_image: f64,
}

pub const REGION_SCORES: PublishedRegionScores = PublishedRegionScores {
    average_iou: 0.892,
    regions_per_image: 28.943,
};

/// A few per-region micro IoU values from the same table.
pub const REGION_IOU_SAMPLES: [(&str, f64); 6] = [
    ("right lung", 0.929),
    ("left lung", 0.925),
    ("spine", 0.944),
    ("abdomen", 0.923),
    ("left mid lung zone", 0.900),
    ("mediastinum", 0.875),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedLesionScores {
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub map_50: f64,
    pub map_95: f64,
}

pub const LESION_SCORES: PublishedLesionScores = PublishedLesionScores {
    mean_precision: 0.454,
    mean_recall: 0.285,
    map_50: 0.345,
    map_95: 0.285,
};

/// Expert grading row: rubric, brevity, accuracy, danger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedExpertRow {
    pub rubric: f64,
    pub brevity: f64,
    pub accuracy: f64,
    pub danger: f64,
}

pub const EXPERT_ROW: PublishedExpertRow = PublishedExpertRow {
    rubric: 2.26,
    brevity: 0.01,
    accuracy: 3.51,
    danger: 0.03,
};

/// Official train / validation / test sizes after filtering.
pub const SPLIT_SIZES: [(&str, usize); 3] = [("train", 113_915), ("validate", 15_658), ("test", 32_711)];
