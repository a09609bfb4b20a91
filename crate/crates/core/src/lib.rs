//! Content-appeal dataset curation, pairwise and absolute appeal models,
//! appeal heatmaps and heatmap-guided enhancement.

pub mod acquisition;
pub mod appealmap;
pub mod backends;
pub mod cli;
pub mod domain;
pub mod error;
pub mod eval;
pub mod field;
pub mod labeling;
pub mod manifest;
pub mod models;
pub mod nn;
pub mod relevancy;
pub mod synthesis;

pub use error::{AppealError, Result};
