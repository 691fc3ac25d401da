//! Toolkit for anatomy-guided chest X-ray report generation pipelines:
//! region prompts built from scene graphs or detections, the multi-label
//! lesion detector losses, evaluation metrics, and a seeded simulator.

pub mod config;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod simulate;
pub mod squeeze;
pub mod taxonomy;

pub use error::{Error, Result};
