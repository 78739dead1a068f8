//! End-to-end helpers: keypoint scoring and selection, descriptor
//! reduction, index construction and verified querying.

use rayon::prelude::*;

use crate::attention::{attach_scores, AttentionScorer};
use crate::error::{Error, Result};
use crate::evaluation::ResultRecord;
use crate::feature::{Descriptor, ImageFeatures};
use crate::index::{build_index, round_pca, IndexConfig, RetrievalIndex, SearchParams};
use crate::linalg::{self, PcaModel};
use crate::matcher::{rank_results, RansacParams, VerificationResult};

/// Scores features with the attention scorer when one is given (otherwise
/// keeps the stored scores) and keeps the `cap` best.
pub fn select_features(
    image: &ImageFeatures,
    scorer: Option<&AttentionScorer>,
    cap: usize,
) -> Result<ImageFeatures> {
    let scored = match scorer {
        Some(s) => attach_scores(s, image)?,
        None => image.clone(),
    };
    Ok(scored.select_top(cap))
}

/// PCA on the L2-normalized raw descriptors of the given images, rounded to
/// the precision it is stored with.
pub fn train_reduction(images: &[ImageFeatures], out_dim: usize) -> Result<PcaModel> {
    let points: Vec<Vec<f64>> = images
        .iter()
        .flat_map(|img| &img.features)
        .map(|f| linalg::l2_normalize(f.descriptor.as_slice()))
        .collect();
    if points.is_empty() {
        return Err(Error::invalid("no descriptors to train the reduction on"));
    }
    let mut pca = linalg::pca_train(&points, out_dim)?;
    round_pca(&mut pca);
    Ok(pca)
}

pub fn reduce_image(pca: &PcaModel, image: &ImageFeatures) -> Result<ImageFeatures> {
    let mut out = image.clone();
    for f in &mut out.features {
        let reduced: Descriptor = linalg::reduce_descriptor(pca, &f.descriptor)?;
        f.descriptor = reduced;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams {
    pub index: IndexConfig,
    pub feature_cap: usize,
    pub search: SearchParams,
    pub ransac: RansacParams,
    pub seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            index: IndexConfig::default(),
            feature_cap: crate::feature::DEFAULT_FEATURE_CAP,
            search: SearchParams::default(),
            ransac: RansacParams::default(),
            seed: 0,
        }
    }
}

/// Selects features, fits the reduction to `index.descriptor_dim`, and
/// indexes the reduced descriptors. The reduction is stored in the index.
pub fn build_pipeline_index(
    db: &[ImageFeatures],
    scorer: Option<&AttentionScorer>,
    params: &PipelineParams,
) -> Result<RetrievalIndex> {
    let selected: Vec<ImageFeatures> = db
        .par_iter()
        .map(|img| select_features(img, scorer, params.feature_cap))
        .collect::<Result<_>>()?;
    let pca = train_reduction(&selected, params.index.descriptor_dim)?;
    let reduced: Vec<ImageFeatures> = selected
        .par_iter()
        .map(|img| reduce_image(&pca, img))
        .collect::<Result<_>>()?;
    log::info!(
        "indexing {} images, {} descriptors",
        reduced.len(),
        reduced.iter().map(|i| i.features.len()).sum::<usize>()
    );
    Ok(build_index(&reduced, &params.index, params.seed)?.with_pca(pca))
}

/// Verified, ranked database matches for one raw query image.
pub fn query_image(
    index: &RetrievalIndex,
    query: &ImageFeatures,
    scorer: Option<&AttentionScorer>,
    params: &PipelineParams,
) -> Result<Vec<VerificationResult>> {
    let selected = select_features(query, scorer, params.feature_cap)?;
    let reduced = match &index.pca {
        Some(pca) => reduce_image(pca, &selected)?,
        None => selected,
    };
    let candidates = index.search_image(&reduced, &params.search)?;
    rank_results(&candidates, &params.ransac)
}

/// Runs every query; output follows query order, each query's matches
/// ranked best first.
pub fn run_queries(
    index: &RetrievalIndex,
    queries: &[ImageFeatures],
    scorer: Option<&AttentionScorer>,
    params: &PipelineParams,
) -> Result<Vec<ResultRecord>> {
    let per_query: Vec<Vec<ResultRecord>> = queries
        .par_iter()
        .map(|q| {
            Ok(query_image(index, q, scorer, params)?
                .into_iter()
                .map(|r| ResultRecord {
                    query_id: q.image_id.clone(),
                    image_id: r.image_id,
                    inliers: r.inlier_count,
                    total: r.total_correspondences,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}
