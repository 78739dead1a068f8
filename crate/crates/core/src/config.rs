//! One flat, declarative configuration document covering every stage.
//! Files are TOML; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{TrainConfig, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::evaluation::{DEFAULT_FUSION_WEIGHT, DEFAULT_GT_THRESHOLD_KM, DEFAULT_MIN_PHOTOS};
use crate::feature::DEFAULT_FEATURE_CAP;
use crate::index::{IndexConfig, SearchParams};
use crate::matcher::RansacParams;
use crate::pipeline::PipelineParams;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,

    // index
    pub coarse_k: usize,
    pub kd_leaf_max: usize,
    pub pq_m: usize,
    pub pq_bits: u32,
    pub descriptor_dim: usize,
    pub kmeans_iters: usize,
    pub pq_iters: usize,

    // search
    pub top_k: usize,
    pub soft_assign: usize,
    pub leaf_budget: usize,
    pub feature_cap: usize,

    // verification
    pub ransac_iters: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,

    // evaluation
    pub gt_threshold_km: f64,
    pub min_photos: usize,
    pub fusion_weight: f64,

    // attention training
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,

    // synthetic corpus
    pub n_landmarks: usize,
    pub images_per_landmark: usize,
    pub queries_per_landmark: usize,
    pub features_per_image: usize,
    pub parts_per_landmark: usize,
    pub raw_dim: usize,
    pub n_discriminative_dims: usize,
    pub noise_sigma: f64,
    pub distractor_queries: usize,
    pub geo_spread_km: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let index = IndexConfig::default();
        let search = SearchParams::default();
        let ransac = RansacParams::default();
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        PipelineConfig {
            seed: 0,
            coarse_k: index.coarse_k,
            kd_leaf_max: index.kd_leaf_max,
            pq_m: index.pq_m,
            pq_bits: index.pq_bits,
            descriptor_dim: index.descriptor_dim,
            kmeans_iters: index.kmeans_iters,
            pq_iters: index.pq_iters,
            top_k: search.top_k,
            soft_assign: search.soft_assign,
            leaf_budget: search.leaf_budget,
            feature_cap: DEFAULT_FEATURE_CAP,
            ransac_iters: ransac.iters,
            inlier_tol: ransac.inlier_tol,
            min_inliers: ransac.min_inliers,
            gt_threshold_km: DEFAULT_GT_THRESHOLD_KM,
            min_photos: DEFAULT_MIN_PHOTOS,
            fusion_weight: DEFAULT_FUSION_WEIGHT,
            hidden: DEFAULT_HIDDEN,
            lr: train.lr,
            steps: train.steps,
            n_landmarks: synth.n_landmarks,
            images_per_landmark: synth.images_per_landmark,
            queries_per_landmark: synth.queries_per_landmark,
            features_per_image: synth.features_per_image,
            parts_per_landmark: synth.parts_per_landmark,
            raw_dim: synth.raw_dim,
            n_discriminative_dims: synth.n_discriminative_dims,
            noise_sigma: synth.noise_sigma,
            distractor_queries: synth.distractor_queries,
            geo_spread_km: synth.geo_spread_km,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidInput(m) => Error::invalid(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            coarse_k: self.coarse_k,
            kd_leaf_max: self.kd_leaf_max,
            pq_m: self.pq_m,
            pq_bits: self.pq_bits,
            descriptor_dim: self.descriptor_dim,
            kmeans_iters: self.kmeans_iters,
            pq_iters: self.pq_iters,
        }
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            soft_assign: self.soft_assign,
            leaf_budget: self.leaf_budget,
            top_k: self.top_k,
        }
    }

    pub fn ransac_params(&self) -> RansacParams {
        RansacParams {
            iters: self.ransac_iters,
            inlier_tol: self.inlier_tol,
            min_inliers: self.min_inliers,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            lr: self.lr,
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_landmarks: self.n_landmarks,
            images_per_landmark: self.images_per_landmark,
            queries_per_landmark: self.queries_per_landmark,
            features_per_image: self.features_per_image,
            parts_per_landmark: self.parts_per_landmark,
            raw_dim: self.raw_dim,
            n_discriminative_dims: self.n_discriminative_dims,
            noise_sigma: self.noise_sigma,
            distractor_queries: self.distractor_queries,
            geo_spread_km: self.geo_spread_km,
            seed: self.seed,
        }
    }

    pub fn pipeline_params(&self) -> PipelineParams {
        PipelineParams {
            index: self.index_config(),
            feature_cap: self.feature_cap,
            search: self.search_params(),
            ransac: self.ransac_params(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.index_config().validate()?;
        self.search_params().validate()?;
        self.ransac_params().validate()?;
        self.synth_config().validate()?;
        if self.hidden == 0 {
            return Err(Error::invalid("hidden must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::invalid("fusion_weight must be in [0, 1]"));
        }
        if !(self.gt_threshold_km >= 0.0 && self.gt_threshold_km.is_finite()) {
            return Err(Error::invalid("gt_threshold_km must be finite and non-negative"));
        }
        Ok(())
    }
}
