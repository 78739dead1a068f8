//! Local-feature image retrieval.
//!
//! The pipeline runs downstream of a dense feature extractor: per-feature
//! relevance scoring with a small attention network, top-k keypoint
//! selection, PCA reduction, a product-quantized inverted index with
//! KD-tree-partitioned cells, RANSAC geometric verification, and
//! distractor-aware precision/recall evaluation. A deterministic synthetic
//! generator stands in for real imagery.

pub mod attention;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod index;
pub mod linalg;
pub mod matcher;
pub mod pipeline;
pub mod quantizer;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
