pub mod ce;
pub mod detection;
pub mod expert;
pub mod nlg;
pub mod reference;
pub mod region;
pub mod report;

pub use ce::{ce_metrics, Averaging, CeResult, LabelMatrix, LabelRecord};
pub use detection::{detection_eval, lesion_ground_truth, DetectionEvalConfig, DetectionEvalImage, GtBox};
pub use expert::{aggregate_expert_scores, ExpertScore, RubricMap};
pub use nlg::{Corpus, MetricRegistry, NlgOptions, Sample, Smoothing, TextMetric};
pub use region::{region_eval, RegionEvalResult};
pub use report::MetricReport;
