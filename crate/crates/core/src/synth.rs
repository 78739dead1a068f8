//! Deterministic synthetic data: landmark image corpora with geotags and
//! distractor queries, planted-transform correspondence sets, labeled
//! feature bags for attention training, and clustered descriptor sets for
//! nearest-neighbor benchmarks.
//!
//! Every generator is a pure function of its config; all randomness comes
//! from one sequentially consumed [`Rng`] stream.

use serde::{Deserialize, Serialize};

use crate::attention::FeatureBag;
use crate::error::{Error, Result};
use crate::evaluation::{GeoRecord, EARTH_RADIUS_KM};
use crate::feature::{feature_center, Descriptor, ImageFeatures, LocalFeature, ReceptiveFieldSpec};
use crate::matcher::{AffineModel, Correspondence};
use crate::rng::Rng;

pub const FRAME_WIDTH: f64 = 640.0;
pub const FRAME_HEIGHT: f64 = 480.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_landmarks: usize,
    pub images_per_landmark: usize,
    pub queries_per_landmark: usize,
    pub features_per_image: usize,
    /// Distinct parts (grid cells with their own prototype) per landmark;
    /// each image shows a random subset of `features_per_image` of them.
    pub parts_per_landmark: usize,
    pub raw_dim: usize,
    pub n_discriminative_dims: usize,
    pub noise_sigma: f64,
    pub distractor_queries: usize,
    pub geo_spread_km: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_landmarks: 50,
            images_per_landmark: 20,
            queries_per_landmark: 2,
            features_per_image: 100,
            parts_per_landmark: 150,
            raw_dim: 64,
            n_discriminative_dims: 32,
            noise_sigma: 0.25,
            distractor_queries: 100,
            geo_spread_km: 2.0,
            seed: 0,
        }
    }
}

/// Grid of receptive-field centers covering the frame at scale 1.0.
fn grid_shape(spec: &ReceptiveFieldSpec) -> (usize, usize) {
    let s = spec.base_stride as f64;
    ((FRAME_HEIGHT / s) as usize, (FRAME_WIDTH / s) as usize)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_landmarks", self.n_landmarks),
            ("images_per_landmark", self.images_per_landmark),
            ("features_per_image", self.features_per_image),
            ("parts_per_landmark", self.parts_per_landmark),
            ("raw_dim", self.raw_dim),
            ("n_discriminative_dims", self.n_discriminative_dims),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.n_discriminative_dims > self.raw_dim {
            return Err(Error::invalid("n_discriminative_dims exceeds raw_dim"));
        }
        if self.features_per_image > self.parts_per_landmark {
            return Err(Error::invalid("features_per_image exceeds parts_per_landmark"));
        }
        let (rows, cols) = grid_shape(&ReceptiveFieldSpec::default());
        if self.parts_per_landmark > rows * cols {
            return Err(Error::invalid(format!(
                "parts_per_landmark exceeds the {} grid cells of the frame",
                rows * cols
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        if !(self.geo_spread_km >= 0.0 && self.geo_spread_km <= 10.0) {
            return Err(Error::invalid("geo_spread_km must be in [0, 10]"));
        }
        if self.n_landmarks > 1000 {
            return Err(Error::invalid("at most 1000 landmarks"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkDataset {
    pub db: Vec<ImageFeatures>,
    pub db_geo: Vec<GeoRecord>,
    pub queries: Vec<ImageFeatures>,
    pub query_geo: Vec<GeoRecord>,
    /// Planted landmark of each query; `None` for distractors.
    pub query_landmark: Vec<Option<String>>,
}

pub fn landmark_id(i: usize) -> String {
    format!("L{i:03}")
}

/// Landmarks sit on a 1° grid (10 per row) so any two are > 50 km apart.
fn landmark_location(i: usize) -> (f64, f64) {
    (40.0 + (i / 10) as f64, 1.0 + (i % 10) as f64)
}

fn jitter_location(rng: &mut Rng, center: (f64, f64), radius_km: f64) -> (f64, f64) {
    let r = radius_km * rng.next_f64().sqrt();
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    let dlat = (r * theta.sin() / EARTH_RADIUS_KM).to_degrees();
    let dlon = (r * theta.cos() / (EARTH_RADIUS_KM * center.0.to_radians().cos())).to_degrees();
    (center.0 + dlat, center.1 + dlon)
}

fn random_warp(rng: &mut Rng) -> AffineModel {
    let theta = rng.uniform(-0.25, 0.25);
    let s = rng.uniform(0.8, 1.2);
    let shear = rng.uniform(-0.05, 0.05);
    let (c, sn) = (theta.cos(), theta.sin());
    let a11 = s * c;
    let a12 = s * (-sn + shear);
    let a21 = s * sn;
    let a22 = s * c;
    let (cx, cy) = (FRAME_WIDTH / 2.0, FRAME_HEIGHT / 2.0);
    AffineModel {
        a11,
        a12,
        a21,
        a22,
        tx: cx - (a11 * cx + a12 * cy) + rng.uniform(-30.0, 30.0),
        ty: cy - (a21 * cx + a22 * cy) + rng.uniform(-30.0, 30.0),
    }
}

fn make_feature(loc: [f64; 2], scale: f64, descriptor: Vec<f64>) -> LocalFeature {
    let d = Descriptor(descriptor);
    LocalFeature {
        x: loc[0],
        y: loc[1],
        scale,
        score: d.norm(),
        descriptor: d,
    }
}

struct Landmark {
    centers: Vec<[f64; 2]>,
    prototypes: Vec<Vec<f64>>,
}

fn landmark_image(rng: &mut Rng, lm: &Landmark, cfg: &SynthConfig) -> Vec<LocalFeature> {
    let warp = random_warp(rng);
    let scale = warp.det().abs().sqrt();
    let mut parts: Vec<usize> = (0..lm.centers.len()).collect();
    rng.shuffle(&mut parts);
    parts.truncate(cfg.features_per_image);
    parts
        .into_iter()
        .map(|p| {
            let desc = lm.prototypes[p]
                .iter()
                .map(|&v| v + rng.gaussian(0.0, cfg.noise_sigma))
                .collect();
            make_feature(warp.apply(lm.centers[p]), scale, desc)
        })
        .collect()
}

/// Landmark images, per-landmark queries and distractor queries.
///
/// Each landmark owns `parts_per_landmark` grid cells with a Gaussian
/// prototype (non-zero on the first `n_discriminative_dims` dimensions).
/// An image warps a random subset of the parts by a random affine map and
/// adds `noise_sigma` noise to every descriptor dimension. Distractor
/// descriptors are standard normal in every dimension at uniform random
/// locations, far from every landmark geographically.
pub fn gen_landmark_dataset(cfg: &SynthConfig) -> Result<LandmarkDataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let spec = ReceptiveFieldSpec::default();
    let (rows, cols) = grid_shape(&spec);
    let mut out = LandmarkDataset {
        db: Vec::new(),
        db_geo: Vec::new(),
        queries: Vec::new(),
        query_geo: Vec::new(),
        query_landmark: Vec::new(),
    };
    for l in 0..cfg.n_landmarks {
        let lid = landmark_id(l);
        let mut cells: Vec<usize> = (0..rows * cols).collect();
        rng.shuffle(&mut cells);
        cells.truncate(cfg.parts_per_landmark);
        let centers = cells
            .iter()
            .map(|&c| {
                let (x, y) = feature_center(spec, (c / cols) as u32, (c % cols) as u32, 1.0);
                [x, y]
            })
            .collect();
        let prototypes = (0..cfg.parts_per_landmark)
            .map(|_| {
                (0..cfg.raw_dim)
                    .map(|j| if j < cfg.n_discriminative_dims { rng.normal() } else { 0.0 })
                    .collect()
            })
            .collect();
        let lm = Landmark { centers, prototypes };
        let home = landmark_location(l);
        for i in 0..cfg.images_per_landmark {
            let id = format!("{lid}_db{i:03}");
            out.db.push(ImageFeatures::new(id.clone(), landmark_image(&mut rng, &lm, cfg)));
            let (lat, lon) = jitter_location(&mut rng, home, cfg.geo_spread_km);
            out.db_geo.push(GeoRecord {
                image_id: id,
                lat,
                lon,
                landmark_id: Some(lid.clone()),
            });
        }
        for i in 0..cfg.queries_per_landmark {
            let id = format!("{lid}_q{i:03}");
            out.queries.push(ImageFeatures::new(id.clone(), landmark_image(&mut rng, &lm, cfg)));
            let (lat, lon) = jitter_location(&mut rng, home, cfg.geo_spread_km);
            out.query_geo.push(GeoRecord {
                image_id: id,
                lat,
                lon,
                landmark_id: None,
            });
            out.query_landmark.push(Some(lid.clone()));
        }
    }
    for i in 0..cfg.distractor_queries {
        let id = format!("D{i:04}");
        let features = (0..cfg.features_per_image)
            .map(|_| {
                let loc = [rng.uniform(0.0, FRAME_WIDTH), rng.uniform(0.0, FRAME_HEIGHT)];
                make_feature(loc, 1.0, (0..cfg.raw_dim).map(|_| rng.normal()).collect())
            })
            .collect();
        out.queries.push(ImageFeatures::new(id.clone(), features));
        out.query_geo.push(GeoRecord {
            image_id: id,
            lat: rng.uniform(-30.0, -20.0),
            lon: rng.uniform(100.0, 120.0),
            landmark_id: None,
        });
        out.query_landmark.push(None);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub n_inliers: usize,
    pub n_outliers: usize,
    pub transform: AffineModel,
    pub noise_px: f64,
    pub seed: u64,
}

/// Correspondences under a planted affine map plus uniform outliers,
/// shuffled together; the mask marks planted inliers.
pub fn gen_geometry_pair(cfg: &GeometryConfig) -> Result<(Vec<Correspondence>, Vec<bool>)> {
    if cfg.n_inliers < 3 {
        return Err(Error::invalid("at least 3 inliers are required"));
    }
    if !(cfg.noise_px >= 0.0) {
        return Err(Error::invalid("noise_px must be non-negative"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut pairs = Vec::with_capacity(cfg.n_inliers + cfg.n_outliers);
    let frame = |rng: &mut Rng| [rng.uniform(0.0, FRAME_WIDTH), rng.uniform(0.0, FRAME_HEIGHT)];
    for _ in 0..cfg.n_inliers {
        let q = frame(&mut rng);
        let p = cfg.transform.apply(q);
        let db = [p[0] + rng.gaussian(0.0, cfg.noise_px), p[1] + rng.gaussian(0.0, cfg.noise_px)];
        pairs.push((Correspondence::new(q, db), true));
    }
    for _ in 0..cfg.n_outliers {
        let q = frame(&mut rng);
        pairs.push((Correspondence::new(q, frame(&mut rng)), false));
    }
    rng.shuffle(&mut pairs);
    Ok(pairs.into_iter().unzip())
}

/// Random similarity-like affine used by the geometry fixtures.
pub fn random_affine(rng: &mut Rng) -> AffineModel {
    random_warp(rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BagConfig {
    pub n_classes: usize,
    pub bags_per_class: usize,
    pub features_per_bag: usize,
    pub dim: usize,
    pub discriminative_fraction: f64,
    /// Length of the class signature vector.
    pub signature_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig {
            n_classes: 3,
            bags_per_class: 50,
            features_per_bag: 20,
            dim: 16,
            discriminative_fraction: 0.25,
            signature_amplitude: 4.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Labeled bags: a `discriminative_fraction` of each bag's features are the
/// class signature plus noise, the rest pure noise. The mask marks the
/// discriminative features of each bag.
pub fn gen_classification_bags(cfg: &BagConfig) -> Result<(Vec<FeatureBag>, Vec<Vec<bool>>)> {
    if cfg.n_classes == 0 || cfg.bags_per_class == 0 || cfg.features_per_bag == 0 || cfg.dim == 0 {
        return Err(Error::invalid("bag generator counts must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.discriminative_fraction) {
        return Err(Error::invalid("discriminative_fraction must be in [0, 1]"));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::invalid("noise_sigma must be non-negative"));
    }
    let mut rng = Rng::new(cfg.seed);
    let signatures: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| rng.normal()).collect();
            let n = crate::linalg::norm(&v);
            v.iter().map(|x| x * cfg.signature_amplitude / n).collect()
        })
        .collect();
    let n_disc = (cfg.discriminative_fraction * cfg.features_per_bag as f64).round() as usize;
    let mut bags = Vec::new();
    let mut masks = Vec::new();
    for label in 0..cfg.n_classes {
        for _ in 0..cfg.bags_per_class {
            let mut items: Vec<(Vec<f64>, bool)> = (0..cfg.features_per_bag)
                .map(|i| {
                    let disc = i < n_disc;
                    let f = (0..cfg.dim)
                        .map(|j| {
                            let base = if disc { signatures[label][j] } else { 0.0 };
                            base + rng.gaussian(0.0, cfg.noise_sigma)
                        })
                        .collect();
                    (f, disc)
                })
                .collect();
            rng.shuffle(&mut items);
            let (features, mask): (Vec<_>, Vec<_>) = items.into_iter().unzip();
            bags.push(FeatureBag { features, label });
            masks.push(mask);
        }
    }
    Ok((bags, masks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorCorpusConfig {
    pub n_clusters: usize,
    pub points_per_cluster: usize,
    pub n_queries: usize,
    pub dim: usize,
    /// Standard deviation of cluster centers around the origin.
    pub center_sigma: f64,
    /// Within-cluster standard deviation along the leading axis.
    pub spread: f64,
    /// Within-cluster variance along axis i falls as (i + 1)^-decay.
    pub decay: f64,
    pub seed: u64,
}

impl Default for DescriptorCorpusConfig {
    fn default() -> Self {
        DescriptorCorpusConfig {
            n_clusters: 1000,
            points_per_cluster: 100,
            n_queries: 1000,
            dim: 40,
            center_sigma: 1.0,
            spread: 2.0,
            decay: 1.0,
            seed: 0,
        }
    }
}

/// Gaussian-mixture vectors with an anisotropic, decaying within-cluster
/// spectrum. Queries are fresh draws from random clusters.
pub fn gen_descriptor_corpus(cfg: &DescriptorCorpusConfig) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if cfg.n_clusters == 0 || cfg.points_per_cluster == 0 || cfg.dim == 0 {
        return Err(Error::invalid("descriptor corpus counts must be at least 1"));
    }
    let mut rng = Rng::new(cfg.seed);
    let sd: Vec<f64> = (0..cfg.dim)
        .map(|i| cfg.spread * ((i + 1) as f64).powf(-cfg.decay / 2.0))
        .collect();
    let centers: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| (0..cfg.dim).map(|_| rng.gaussian(0.0, cfg.center_sigma)).collect())
        .collect();
    let draw = |rng: &mut Rng, c: &[f64]| -> Vec<f64> {
        c.iter().zip(&sd).map(|(m, s)| m + rng.gaussian(0.0, *s)).collect()
    };
    let mut db = Vec::with_capacity(cfg.n_clusters * cfg.points_per_cluster);
    for c in &centers {
        for _ in 0..cfg.points_per_cluster {
            db.push(draw(&mut rng, c));
        }
    }
    let queries = (0..cfg.n_queries)
        .map(|_| {
            let c = rng.below(cfg.n_clusters);
            draw(&mut rng, &centers[c])
        })
        .collect();
    Ok((db, queries))
}
