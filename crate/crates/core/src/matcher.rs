//! Geometric verification: RANSAC over an affine model fitted to feature
//! location correspondences. The inlier count is the match score.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_INLIER_TOL: f64 = 3.0;
pub const DEFAULT_MIN_INLIERS: usize = 10;
pub const DEFAULT_RANSAC_ITERS: usize = 1000;
pub const DEGENERATE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub query_point: [f64; 2],
    pub db_point: [f64; 2],
}

impl Correspondence {
    pub fn new(query_point: [f64; 2], db_point: [f64; 2]) -> Self {
        Correspondence { query_point, db_point }
    }
}

/// `p' = A·p + t` mapping query coordinates onto database coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineModel {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineModel {
    pub const IDENTITY: AffineModel = AffineModel {
        a11: 1.0,
        a12: 0.0,
        a21: 0.0,
        a22: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a11 * p[0] + self.a12 * p[1] + self.tx,
            self.a21 * p[0] + self.a22 * p[1] + self.ty,
        ]
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn residual(&self, c: &Correspondence) -> f64 {
        let p = self.apply(c.query_point);
        (p[0] - c.db_point[0]).hypot(p[1] - c.db_point[1])
    }

    pub fn params(&self) -> [f64; 6] {
        [self.a11, self.a12, self.a21, self.a22, self.tx, self.ty]
    }

    fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationResult {
    pub image_id: String,
    pub inlier_count: usize,
    pub model: Option<AffineModel>,
    pub total_correspondences: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iters: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iters: DEFAULT_RANSAC_ITERS,
            inlier_tol: DEFAULT_INLIER_TOL,
            min_inliers: DEFAULT_MIN_INLIERS,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_tol > 0.0 && self.inlier_tol.is_finite()) {
            return Err(Error::invalid(format!(
                "inlier_tol must be positive, got {}",
                self.inlier_tol
            )));
        }
        Ok(())
    }
}

/// Exact affine through three correspondences. `None` when the query points
/// are (nearly) collinear or the solved map is singular.
pub fn estimate_affine(sample: &[Correspondence; 3]) -> Option<AffineModel> {
    let [p1, p2, p3] = sample.map(|c| c.query_point);
    let det = (p2[0] - p1[0]) * (p3[1] - p1[1]) - (p3[0] - p1[0]) * (p2[1] - p1[1]);
    if det.abs() < DEGENERATE_EPS {
        return None;
    }
    // Cramer's rule on [x y 1]·[a b t]ᵀ = target, once per output row
    let solve = |u: [f64; 3]| -> [f64; 3] {
        let d = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let rows = [p1, p2, p3];
        let base: [[f64; 3]; 3] = rows.map(|p| [p[0], p[1], 1.0]);
        let full = d(base);
        let mut out = [0.0; 3];
        for (col, o) in out.iter_mut().enumerate() {
            let mut m = base;
            for r in 0..3 {
                m[r][col] = u[r];
            }
            *o = d(m) / full;
        }
        out
    };
    let [a11, a12, tx] = solve(sample.map(|c| c.db_point[0]));
    let [a21, a22, ty] = solve(sample.map(|c| c.db_point[1]));
    let model = AffineModel {
        a11,
        a12,
        a21,
        a22,
        tx,
        ty,
    };
    (model.is_finite() && model.det().abs() > DEGENERATE_EPS).then_some(model)
}

/// Least-squares affine over all given correspondences, computed on
/// centered coordinates.
pub fn fit_affine_least_squares(corrs: &[Correspondence]) -> Option<AffineModel> {
    if corrs.len() < 3 {
        return None;
    }
    let n = corrs.len() as f64;
    let mq = [
        corrs.iter().map(|c| c.query_point[0]).sum::<f64>() / n,
        corrs.iter().map(|c| c.query_point[1]).sum::<f64>() / n,
    ];
    let mp = [
        corrs.iter().map(|c| c.db_point[0]).sum::<f64>() / n,
        corrs.iter().map(|c| c.db_point[1]).sum::<f64>() / n,
    ];
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut bx, mut by) = ([0.0; 2], [0.0; 2]);
    for c in corrs {
        let q = [c.query_point[0] - mq[0], c.query_point[1] - mq[1]];
        let p = [c.db_point[0] - mp[0], c.db_point[1] - mp[1]];
        sxx += q[0] * q[0];
        sxy += q[0] * q[1];
        syy += q[1] * q[1];
        bx[0] += q[0] * p[0];
        bx[1] += q[1] * p[0];
        by[0] += q[0] * p[1];
        by[1] += q[1] * p[1];
    }
    let det = sxx * syy - sxy * sxy;
    if det.abs() < DEGENERATE_EPS * (sxx * syy).max(1.0) {
        return None;
    }
    let solve = |b: [f64; 2]| [(syy * b[0] - sxy * b[1]) / det, (sxx * b[1] - sxy * b[0]) / det];
    let [a11, a12] = solve(bx);
    let [a21, a22] = solve(by);
    let model = AffineModel {
        a11,
        a12,
        a21,
        a22,
        tx: mp[0] - a11 * mq[0] - a12 * mq[1],
        ty: mp[1] - a21 * mq[0] - a22 * mq[1],
    };
    (model.is_finite() && model.det().abs() > DEGENERATE_EPS).then_some(model)
}

pub fn count_inliers(model: &AffineModel, corrs: &[Correspondence], tol: f64) -> usize {
    corrs.iter().filter(|c| model.residual(c) <= tol).count()
}

pub fn inlier_mask(model: &AffineModel, corrs: &[Correspondence], tol: f64) -> Vec<bool> {
    corrs.iter().map(|c| model.residual(c) <= tol).collect()
}

/// Best raw sample model and its inlier count, before refitting.
pub fn ransac_best_sample(
    corrs: &[Correspondence],
    iters: usize,
    inlier_tol: f64,
    seed: u64,
) -> Option<(AffineModel, usize)> {
    let n = corrs.len();
    if n < 3 {
        return None;
    }
    let mut rng = Rng::new(seed);
    let mut best: Option<(AffineModel, usize)> = None;
    for _ in 0..iters {
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.below(n - 2);
        let (lo, hi) = (i.min(j), i.max(j));
        if k >= lo {
            k += 1;
        }
        if k >= hi {
            k += 1;
        }
        let Some(model) = estimate_affine(&[corrs[i], corrs[j], corrs[k]]) else {
            continue;
        };
        let count = count_inliers(&model, corrs, inlier_tol);
        if best.map_or(true, |(_, b)| count > b) {
            best = Some((model, count));
        }
    }
    best
}

pub fn ransac_verify(
    image_id: &str,
    corrs: &[Correspondence],
    params: &RansacParams,
) -> Result<VerificationResult> {
    params.validate()?;
    let reject = |count| VerificationResult {
        image_id: image_id.to_string(),
        inlier_count: count,
        model: None,
        total_correspondences: corrs.len(),
    };
    let Some((sample_model, raw)) = ransac_best_sample(corrs, params.iters, params.inlier_tol, params.seed)
    else {
        return Ok(reject(0));
    };
    if raw < params.min_inliers {
        return Ok(reject(raw));
    }
    let winners: Vec<Correspondence> = corrs
        .iter()
        .copied()
        .filter(|c| sample_model.residual(c) <= params.inlier_tol)
        .collect();
    let model = fit_affine_least_squares(&winners).unwrap_or(sample_model);
    let count = count_inliers(&model, corrs, params.inlier_tol);
    if count < params.min_inliers {
        return Ok(reject(count));
    }
    Ok(VerificationResult {
        image_id: image_id.to_string(),
        inlier_count: count,
        model: Some(model),
        total_correspondences: corrs.len(),
    })
}

/// Verifies every candidate image and keeps the accepted ones, best first
/// (inlier count descending, then image id).
pub fn rank_results(
    candidates: &BTreeMap<String, Vec<Correspondence>>,
    params: &RansacParams,
) -> Result<Vec<VerificationResult>> {
    params.validate()?;
    let mut results: Vec<VerificationResult> = candidates
        .par_iter()
        .filter(|(_, c)| c.len() >= params.min_inliers.max(3))
        .map(|(id, c)| ransac_verify(id, c, params))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|r| r.model.is_some() && r.inlier_count >= params.min_inliers)
        .collect();
    results.sort_by(|a, b| {
        b.inlier_count
            .cmp(&a.inlier_count)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    Ok(results)
}
