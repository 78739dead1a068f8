//! Ground truth from geotags, precision/recall sweeps over all queries at
//! once, mean average precision, and late fusion of two score sources.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_GT_THRESHOLD_KM: f64 = 25.0;
pub const DEFAULT_MIN_PHOTOS: usize = 3;
pub const DEFAULT_FUSION_WEIGHT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoRecord {
    pub image_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub landmark_id: Option<String>,
}

impl GeoRecord {
    pub fn validate(&self) -> Result<()> {
        check_coords(self.lat, self.lon)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    /// Query id → landmarks it is relevant to. Distractors map to an empty set.
    pub relevant: BTreeMap<String, BTreeSet<String>>,
    /// Every labeled database image → its landmark.
    pub landmark_of: BTreeMap<String, String>,
}

impl GroundTruth {
    pub fn is_distractor(&self, query_id: &str) -> bool {
        self.relevant.get(query_id).map_or(true, BTreeSet::is_empty)
    }

    fn is_hit(&self, query_id: &str, image_id: &str) -> bool {
        match (self.relevant.get(query_id), self.landmark_of.get(image_id)) {
            (Some(rel), Some(l)) => rel.contains(l),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: String,
    pub score: f64,
}

/// Query id → scored database images.
pub type RetrievalRun = BTreeMap<String, Vec<ScoredImage>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: usize,
}

fn check_coords(lat: f64, lon: f64) -> Result<()> {
    if !(lat.abs() <= 90.0 && lon.abs() <= 180.0) {
        return Err(Error::invalid(format!("coordinates out of range: ({lat}, {lon})")));
    }
    Ok(())
}

/// Great-circle distance in kilometres; inputs are (lat, lon) in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    check_coords(a.0, a.1)?;
    check_coords(b.0, b.1)?;
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

pub fn build_ground_truth(
    db: &[GeoRecord],
    queries: &[GeoRecord],
    threshold_km: f64,
    min_photos: usize,
) -> Result<GroundTruth> {
    if db.is_empty() {
        return Err(Error::invalid("ground truth needs at least one database record"));
    }
    if !(threshold_km >= 0.0) {
        return Err(Error::invalid("threshold_km must be non-negative"));
    }
    let mut landmark_of = BTreeMap::new();
    let mut members: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in db {
        r.validate()?;
        let l = r.landmark_id.clone().ok_or_else(|| {
            Error::invalid(format!("database image {} has no landmark label", r.image_id))
        })?;
        if landmark_of.insert(r.image_id.clone(), l.clone()).is_some() {
            return Err(Error::invalid(format!("duplicate database image {}", r.image_id)));
        }
        members.entry(l).or_default().push((r.lat, r.lon));
    }
    let centroids: Vec<(String, (f64, f64))> = members
        .into_iter()
        .filter(|(_, pts)| pts.len() >= min_photos)
        .map(|(l, pts)| {
            let n = pts.len() as f64;
            let lat = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let lon = pts.iter().map(|p| p.1).sum::<f64>() / n;
            (l, (lat, lon))
        })
        .collect();
    let mut relevant = BTreeMap::new();
    for q in queries {
        q.validate()?;
        let mut set = BTreeSet::new();
        for (l, c) in &centroids {
            if haversine_km((q.lat, q.lon), *c)? < threshold_km {
                set.insert(l.clone());
            }
        }
        if relevant.insert(q.image_id.clone(), set).is_some() {
            return Err(Error::invalid(format!("duplicate query {}", q.image_id)));
        }
    }
    Ok(GroundTruth { relevant, landmark_of })
}

fn rank_cmp(a: &ScoredImage, b: &ScoredImage) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id))
}

/// Keeps the best-scoring image of each landmark; output sorted by score
/// descending, then image id.
pub fn dedup_top_per_landmark(
    results: &[ScoredImage],
    landmark_of: &BTreeMap<String, String>,
) -> Result<Vec<ScoredImage>> {
    let mut best: BTreeMap<&str, &ScoredImage> = BTreeMap::new();
    for r in results {
        let l = landmark_of
            .get(&r.image_id)
            .ok_or_else(|| Error::invalid(format!("unknown image {}", r.image_id)))?;
        let slot = best.entry(l.as_str()).or_insert(r);
        if rank_cmp(r, slot).is_lt() {
            *slot = r;
        }
    }
    let mut out: Vec<ScoredImage> = best.into_values().cloned().collect();
    out.sort_by(rank_cmp);
    Ok(out)
}

pub fn dedup_run(run: &RetrievalRun, gt: &GroundTruth) -> Result<RetrievalRun> {
    run.iter()
        .map(|(q, rs)| Ok((q.clone(), dedup_top_per_landmark(rs, &gt.landmark_of)?)))
        .collect()
}

/// One point per distinct score, highest threshold first. Queries absent
/// from the ground truth are treated as distractors.
pub fn pr_sweep(run: &RetrievalRun, gt: &GroundTruth) -> Vec<PrPoint> {
    let mut all: Vec<(f64, bool)> = run
        .iter()
        .flat_map(|(q, rs)| rs.iter().map(move |r| (r.score, gt.is_hit(q, &r.image_id))))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut retrieved, mut tp) = (0usize, 0usize);
    for (i, &(score, hit)) in all.iter().enumerate() {
        retrieved += 1;
        tp += usize::from(hit);
        if all.get(i + 1).map_or(true, |next| next.0 != score) {
            points.push(PrPoint {
                threshold: score,
                precision: tp as f64 / retrieved as f64,
                recall: tp,
            });
        }
    }
    points
}

/// Best precision reachable with at least `min_recall` true positives.
pub fn max_precision_at_recall(points: &[PrPoint], min_recall: usize) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.recall >= min_recall)
        .map(|p| p.precision)
        .max_by(f64::total_cmp)
}

/// Mean over non-distractor queries of average precision, where each
/// query's relevant set is every database image of its relevant landmarks.
pub fn mean_average_precision(run: &RetrievalRun, gt: &GroundTruth) -> Result<f64> {
    let mut per_landmark: BTreeMap<&str, usize> = BTreeMap::new();
    for l in gt.landmark_of.values() {
        *per_landmark.entry(l.as_str()).or_default() += 1;
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (q, rel) in &gt.relevant {
        if rel.is_empty() {
            continue;
        }
        let n_rel: usize = rel.iter().map(|l| per_landmark.get(l.as_str()).copied().unwrap_or(0)).sum();
        if n_rel == 0 {
            continue;
        }
        let mut ranked: Vec<&ScoredImage> = run.get(q).map(|v| v.iter().collect()).unwrap_or_default();
        ranked.sort_by(|a, b| rank_cmp(a, b));
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (rank, r) in ranked.iter().enumerate() {
            if gt.is_hit(q, &r.image_id) {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
        }
        total += sum / n_rel as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no evaluable (non-distractor) queries"));
    }
    Ok(total / n as f64)
}

fn min_max(scores: &[ScoredImage]) -> BTreeMap<&str, f64> {
    let lo = scores.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .map(|s| {
            let v = if hi > lo {
                (s.score - lo) / (hi - lo)
            } else if s.score > 0.0 {
                1.0
            } else {
                0.0
            };
            (s.image_id.as_str(), v)
        })
        .collect()
}

/// `weight·local + (1 − weight)·global` after per-query min-max
/// normalization of each source. An image missing from a source scores 0
/// there. A source whose scores are all equal maps positive scores to 1 and
/// the rest to 0.
pub fn late_fusion(local: &RetrievalRun, global: &RetrievalRun, weight: f64) -> Result<RetrievalRun> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("fusion weight {weight} outside [0, 1]")));
    }
    for s in local.values().chain(global.values()).flatten() {
        if !s.score.is_finite() {
            return Err(Error::invalid(format!("non-finite score for {}", s.image_id)));
        }
    }
    let queries: BTreeSet<&String> = local.keys().chain(global.keys()).collect();
    let empty = Vec::new();
    let mut out = RetrievalRun::new();
    for q in queries {
        let l = min_max(local.get(q).unwrap_or(&empty));
        let g = min_max(global.get(q).unwrap_or(&empty));
        let images: BTreeSet<&str> = l.keys().chain(g.keys()).copied().collect();
        let mut fused: Vec<ScoredImage> = images
            .into_iter()
            .map(|id| ScoredImage {
                image_id: id.to_string(),
                score: weight * l.get(id).copied().unwrap_or(0.0)
                    + (1.0 - weight) * g.get(id).copied().unwrap_or(0.0),
            })
            .collect();
        fused.sort_by(rank_cmp);
        out.insert(q.clone(), fused);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Deserialize)]
struct GtRow {
    image_id: String,
    lat: f64,
    lon: f64,
    landmark_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRow {
    query_id: String,
    lat: f64,
    lon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    query_id: String,
    image_id: String,
    score: f64,
}

/// One ranked, verified match as written by the `query` step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub query_id: String,
    pub image_id: String,
    pub inliers: usize,
    pub total: usize,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format("csv", format!("{other:?}")),
    }
}

/// `image_id,lat,lon,landmark_id`
pub fn read_gt_csv<R: Read>(input: R) -> Result<Vec<GeoRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize::<GtRow>() {
        let row = row.map_err(csv_err)?;
        let rec = GeoRecord {
            image_id: row.image_id,
            lat: row.lat,
            lon: row.lon,
            landmark_id: Some(row.landmark_id),
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_gt_csv<W: Write>(records: &[GeoRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "lat", "lon", "landmark_id"]).map_err(csv_err)?;
    for r in records {
        let label = r.landmark_id.as_deref().ok_or_else(|| {
            Error::invalid(format!("record {} has no landmark label", r.image_id))
        })?;
        w.write_record([r.image_id.as_str(), &r.lat.to_string(), &r.lon.to_string(), label])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `query_id,lat,lon`
pub fn read_queries_csv<R: Read>(input: R) -> Result<Vec<GeoRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize::<QueryRow>() {
        let row = row.map_err(csv_err)?;
        let rec = GeoRecord {
            image_id: row.query_id,
            lat: row.lat,
            lon: row.lon,
            landmark_id: None,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_queries_csv<W: Write>(records: &[GeoRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(QueryRow {
            query_id: r.image_id.clone(),
            lat: r.lat,
            lon: r.lon,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `threshold,precision,recall`
pub fn write_pr_csv<W: Write>(points: &[PrPoint], out: W) -> Result<()> {
    // header written by hand so an empty sweep still gets one
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["threshold", "precision", "recall"]).map_err(csv_err)?;
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `query_id,image_id,score`
pub fn read_scores_csv<R: Read>(input: R) -> Result<RetrievalRun> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut run = RetrievalRun::new();
    for row in rdr.deserialize::<ScoreRow>() {
        let row = row.map_err(csv_err)?;
        if !row.score.is_finite() {
            return Err(Error::invalid(format!("non-finite score for {}", row.image_id)));
        }
        run.entry(row.query_id).or_default().push(ScoredImage {
            image_id: row.image_id,
            score: row.score,
        });
    }
    Ok(run)
}

pub fn write_scores_csv<W: Write>(run: &RetrievalRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (q, rs) in run {
        for r in rs {
            w.serialize(ScoreRow {
                query_id: q.clone(),
                image_id: r.image_id.clone(),
                score: r.score,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_results_jsonl<W: Write>(records: &[ResultRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format("results", e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_jsonl<R: BufRead>(input: R) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResultRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("results", format!("line {}: {e}", i + 1)))?;
        if rec.inliers > rec.total {
            return Err(Error::format("results", format!("line {}: inliers exceed total", i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Inlier counts become scores.
pub fn run_from_results(records: &[ResultRecord]) -> RetrievalRun {
    let mut run = RetrievalRun::new();
    for r in records {
        run.entry(r.query_id.clone()).or_default().push(ScoredImage {
            image_id: r.image_id.clone(),
            score: r.inliers as f64,
        });
    }
    run
}

/// Fused scores in the same JSONL shape as a ranked run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub query_id: String,
    pub image_id: String,
    pub score: f64,
}

pub fn write_run_jsonl<W: Write>(run: &RetrievalRun, mut out: W) -> Result<()> {
    for (q, rs) in run {
        for r in rs {
            let rec = FusedRecord {
                query_id: q.clone(),
                image_id: r.image_id.clone(),
                score: r.score,
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| Error::format("run", e.to_string()))?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};

    fn s(id: &str, score: f64) -> ScoredImage {
        ScoredImage {
            image_id: id.to_string(),
            score,
        }
    }

    fn rec(id: &str, lat: f64, lon: f64, l: Option<&str>) -> GeoRecord {
        GeoRecord {
            image_id: id.to_string(),
            lat,
            lon,
            landmark_id: l.map(str::to_string),
        }
    }

    /// Point at `km` due north along a meridian.
    fn north_of(lat: f64, km: f64) -> f64 {
        lat + (km / EARTH_RADIUS_KM).to_degrees()
    }

    #[test]
    fn haversine_values() {
        assert_eq!(haversine_km((10.0, 20.0), (10.0, 20.0)).unwrap(), 0.0);
        let anti = haversine_km((0.0, 0.0), (0.0, 180.0)).unwrap();
        assert_abs_diff_eq!(anti, std::f64::consts::PI * 6371.0, epsilon = 0.01);
        assert_abs_diff_eq!(anti, 20015.09, epsilon = 0.01);
        let deg = haversine_km((0.0, 0.0), (1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(deg, 111.19, epsilon = 0.01);
        assert!(haversine_km((91.0, 0.0), (0.0, 0.0)).is_err());
        assert!(haversine_km((0.0, 0.0), (0.0, -180.5)).is_err());
        let a = haversine_km((12.0, 3.0), (-40.0, 100.0)).unwrap();
        let b = haversine_km((-40.0, 100.0), (12.0, 3.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_threshold_edges() {
        let db = vec![
            rec("a", 10.0, 10.0, Some("L")),
            rec("b", 10.0, 10.0, Some("L")),
            rec("c", 10.0, 10.0, Some("L")),
            rec("d", 40.0, 40.0, Some("small")),
            rec("e", 40.0, 40.0, Some("small")),
        ];
        let queries = vec![
            rec("at", 10.0, 10.0, None),
            rec("in", north_of(10.0, 24.999), 10.0, None),
            rec("out", north_of(10.0, 25.001), 10.0, None),
            rec("small", 40.0, 40.0, None),
        ];
        let gt = build_ground_truth(&db, &queries, 25.0, 3).unwrap();
        assert!(gt.relevant["at"].contains("L"));
        assert!(gt.relevant["in"].contains("L"));
        assert!(gt.is_distractor("out"));
        assert!(gt.is_distractor("small"));
        assert_eq!(gt.landmark_of.len(), 5);
        assert!(build_ground_truth(&[], &queries, 25.0, 3).is_err());
        assert!(build_ground_truth(&[rec("x", 0.0, 0.0, None)], &queries, 25.0, 3).is_err());
    }

    #[test]
    fn ground_truth_threshold_monotone() {
        let mut rng = Rng::new(1);
        let db: Vec<GeoRecord> = (0..60)
            .map(|i| {
                let l = i % 6;
                rec(
                    &format!("d{i}"),
                    l as f64 * 0.3 + rng.uniform(-0.01, 0.01),
                    rng.uniform(-0.01, 0.01),
                    Some(&format!("L{l}")),
                )
            })
            .collect();
        let q: Vec<GeoRecord> = (0..40)
            .map(|i| rec(&format!("q{i}"), rng.uniform(-0.5, 2.0), rng.uniform(-0.3, 0.3), None))
            .collect();
        let wide = build_ground_truth(&db, &q, 25.0, 3).unwrap();
        let narrow = build_ground_truth(&db, &q, 10.0, 3).unwrap();
        for (k, v) in &narrow.relevant {
            assert!(v.is_subset(&wide.relevant[k]));
        }
    }

    #[test]
    fn dedup_keeps_best_per_landmark() {
        let lm: BTreeMap<String, String> = [("a", "L"), ("b", "L"), ("c", "M"), ("d", "N")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let out = dedup_top_per_landmark(&[s("a", 5.0), s("b", 9.0)], &lm).unwrap();
        assert_eq!(out, vec![s("b", 9.0)]);
        let out = dedup_top_per_landmark(&[s("b", 4.0), s("a", 4.0)], &lm).unwrap();
        assert_eq!(out, vec![s("a", 4.0)]);
        let distinct = vec![s("a", 3.0), s("c", 2.0), s("d", 1.0)];
        assert_eq!(dedup_top_per_landmark(&distinct, &lm).unwrap(), distinct);
        assert!(dedup_top_per_landmark(&[s("zz", 1.0)], &lm).is_err());

        let mut rng = Rng::new(2);
        let ids = ["a", "b", "c", "d"];
        for _ in 0..50 {
            let rs: Vec<ScoredImage> = (0..rng.below(8))
                .map(|_| s(ids[rng.below(4)], rng.below(5) as f64))
                .collect();
            let out = dedup_top_per_landmark(&rs, &lm).unwrap();
            let distinct: BTreeSet<&String> = rs.iter().map(|r| &lm[&r.image_id]).collect();
            assert_eq!(out.len(), distinct.len());
        }
    }

    fn two_query_fixture() -> (RetrievalRun, GroundTruth) {
        let mut run = RetrievalRun::new();
        run.insert("q1".into(), vec![s("a", 9.0), s("b", 8.0), s("c", 7.0)]);
        run.insert("q2".into(), vec![s("d", 6.0)]);
        let mut gt = GroundTruth::default();
        for (img, l) in [("a", "A"), ("b", "B"), ("c", "C"), ("d", "D")] {
            gt.landmark_of.insert(img.into(), l.into());
        }
        gt.relevant.insert("q1".into(), ["A", "B"].iter().map(|x| x.to_string()).collect());
        gt.relevant.insert("q2".into(), ["D"].iter().map(|x| x.to_string()).collect());
        (run, gt)
    }

    #[test]
    fn pr_two_query_example() {
        let (run, gt) = two_query_fixture();
        let pts = pr_sweep(&run, &gt);
        let last = pts.last().unwrap();
        assert_eq!(last.precision, 0.75);
        assert_eq!(last.recall, 3);
        assert_eq!(pts.len(), 4);
        assert!(pts.iter().all(|p| p.threshold <= 9.0));
        assert!(pr_sweep(&RetrievalRun::new(), &gt).is_empty());
    }

    pub(crate) fn brute_force_pr(run: &RetrievalRun, gt: &GroundTruth, tau: f64) -> Option<(f64, usize)> {
        let mut retrieved = 0;
        let mut tp = 0;
        for (q, rs) in run {
            for r in rs {
                if r.score >= tau {
                    retrieved += 1;
                    let rel = gt.relevant.get(q);
                    let l = gt.landmark_of.get(&r.image_id);
                    if let (Some(rel), Some(l)) = (rel, l) {
                        if rel.contains(l) {
                            tp += 1;
                        }
                    }
                }
            }
        }
        (retrieved > 0).then(|| (tp as f64 / retrieved as f64, tp))
    }

    fn random_fixture(rng: &mut Rng) -> (RetrievalRun, GroundTruth) {
        let mut gt = GroundTruth::default();
        for i in 0..20 {
            gt.landmark_of.insert(format!("i{i}"), format!("L{}", i % 5));
        }
        let mut run = RetrievalRun::new();
        for q in 0..8 {
            let qid = format!("q{q}");
            let rel: BTreeSet<String> = (0..5)
                .filter(|_| rng.below(3) == 0)
                .map(|l| format!("L{l}"))
                .collect();
            gt.relevant.insert(qid.clone(), rel);
            let rs = (0..rng.below(6))
                .map(|_| s(&format!("i{}", rng.below(20)), rng.below(10) as f64))
                .collect();
            run.insert(qid, rs);
        }
        run.insert("unknown".into(), vec![s("i0", 4.0)]);
        (run, gt)
    }

    #[test]
    fn pr_matches_brute_force() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let (run, gt) = random_fixture(&mut rng);
            let pts = pr_sweep(&run, &gt);
            let mut taus: Vec<f64> = run.values().flatten().map(|r| r.score).collect();
            taus.sort_by(|a, b| b.total_cmp(a));
            taus.dedup();
            assert_eq!(pts.len(), taus.len());
            for (p, tau) in pts.iter().zip(&taus) {
                assert_eq!(p.threshold, *tau);
                let (pre, rec) = brute_force_pr(&run, &gt, *tau).unwrap();
                assert_eq!(p.precision, pre);
                assert_eq!(p.recall, rec);
            }
            assert!(pts.windows(2).all(|w| w[0].recall <= w[1].recall));
            assert!(pts.iter().all(|p| p.precision <= 1.0));
        }
    }

    #[test]
    fn map_simple_cases() {
        let mut gt = GroundTruth::default();
        gt.landmark_of.insert("a".into(), "A".into());
        gt.landmark_of.insert("x".into(), "X".into());
        gt.relevant.insert("q".into(), ["A".to_string()].into());
        gt.relevant.insert("dq".into(), BTreeSet::new());
        let mut run = RetrievalRun::new();
        run.insert("q".into(), vec![s("a", 2.0), s("x", 1.0)]);
        assert_eq!(mean_average_precision(&run, &gt).unwrap(), 1.0);
        run.insert("q".into(), vec![s("a", 1.0), s("x", 2.0)]);
        assert_eq!(mean_average_precision(&run, &gt).unwrap(), 0.5);
        let mut only_distractors = gt.clone();
        only_distractors.relevant.remove("q");
        assert!(mean_average_precision(&run, &only_distractors).is_err());
    }

    fn reference_ap(ranked_hits: &[bool], n_rel: usize) -> f64 {
        // precision@k summed at each relevant position, written out longhand
        let mut ap = 0.0;
        for k in 0..ranked_hits.len() {
            if ranked_hits[k] {
                let hits_so_far = ranked_hits[..=k].iter().filter(|&&h| h).count();
                ap += hits_so_far as f64 / (k + 1) as f64;
            }
        }
        ap / n_rel as f64
    }

    #[test]
    fn map_matches_reference_and_relabeling() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let (run, gt) = random_fixture(&mut rng);
            let mut aps = Vec::new();
            for (q, rel) in &gt.relevant {
                if rel.is_empty() {
                    continue;
                }
                let n_rel = gt.landmark_of.values().filter(|l| rel.contains(*l)).count();
                let mut rs = run.get(q).cloned().unwrap_or_default();
                rs.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.image_id.cmp(&b.image_id)));
                let hits: Vec<bool> = rs.iter().map(|r| rel.contains(&gt.landmark_of[&r.image_id])).collect();
                aps.push(reference_ap(&hits, n_rel));
            }
            match mean_average_precision(&run, &gt) {
                Ok(m) => assert!((m - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-12),
                Err(_) => assert!(aps.is_empty()),
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let mut local = RetrievalRun::new();
        local.insert("q".into(), vec![s("a", 10.0), s("b", 0.0)]);
        let mut global = RetrievalRun::new();
        global.insert("q".into(), vec![s("a", 0.2), s("b", 0.9)]);
        let fused = late_fusion(&local, &global, 0.25).unwrap();
        let a = fused["q"].iter().find(|r| r.image_id == "a").unwrap().score;
        let b = fused["q"].iter().find(|r| r.image_id == "b").unwrap().score;
        assert_eq!(a, 0.25);
        assert_eq!(b, 0.75);
        let ids = |run: &RetrievalRun| -> Vec<String> { run["q"].iter().map(|r| r.image_id.clone()).collect() };
        assert_eq!(ids(&late_fusion(&local, &global, 0.0).unwrap()), ["b", "a"]);
        assert_eq!(ids(&late_fusion(&local, &global, 1.0).unwrap()), ["a", "b"]);
        assert!(late_fusion(&local, &global, 1.5).is_err());
        assert!(late_fusion(&local, &global, -0.1).is_err());

        let mut flat = RetrievalRun::new();
        flat.insert("q".into(), vec![s("a", 3.0), s("b", 3.0)]);
        let f = late_fusion(&flat, &RetrievalRun::new(), 1.0).unwrap();
        assert!(f["q"].iter().all(|r| r.score == 1.0));
    }

    #[test]
    fn csv_and_jsonl_roundtrip() {
        let recs = vec![rec("a", 1.5, -2.25, Some("L1")), rec("b", -3.0, 4.0, Some("L2"))];
        let mut buf = Vec::new();
        write_gt_csv(&recs, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("image_id,lat,lon,landmark_id\n"));
        assert_eq!(read_gt_csv(&buf[..]).unwrap(), recs);

        let qs = vec![rec("q", 0.5, 0.25, None)];
        let mut buf = Vec::new();
        write_queries_csv(&qs, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("query_id,lat,lon\n"));
        assert_eq!(read_queries_csv(&buf[..]).unwrap(), qs);
        assert!(read_queries_csv("query_id,lat,lon\nq,95,0\n".as_bytes()).is_err());

        let mut buf = Vec::new();
        write_pr_csv(&[PrPoint { threshold: 2.0, precision: 0.5, recall: 1 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "threshold,precision,recall\n2.0,0.5,1\n");
        let mut buf = Vec::new();
        write_pr_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "threshold,precision,recall\n");

        let results = vec![ResultRecord {
            query_id: "q".into(),
            image_id: "a".into(),
            inliers: 12,
            total: 30,
        }];
        let mut buf = Vec::new();
        write_results_jsonl(&results, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"query_id\":\"q\",\"image_id\":\"a\",\"inliers\":12,\"total\":30}\n"
        );
        assert_eq!(read_results_jsonl(&buf[..]).unwrap(), results);

        let (run, _) = two_query_fixture();
        let mut buf = Vec::new();
        write_scores_csv(&run, &mut buf).unwrap();
        assert_eq!(read_scores_csv(&buf[..]).unwrap(), run);
    }

    proptest! {
        #[test]
        fn fused_is_convex(a in 0.0f64..100.0, b in 0.0f64..100.0, c in 0.0f64..1.0, d in 0.0f64..1.0, w in 0.0f64..=1.0) {
            let mut local = RetrievalRun::new();
            local.insert("q".into(), vec![s("x", a), s("y", b)]);
            let mut global = RetrievalRun::new();
            global.insert("q".into(), vec![s("x", c), s("y", d)]);
            let ln = min_max(&local["q"]);
            let gn = min_max(&global["q"]);
            let fused = late_fusion(&local, &global, w).unwrap();
            for r in &fused["q"] {
                let (l, g) = (ln[r.image_id.as_str()], gn[r.image_id.as_str()]);
                prop_assert!(r.score >= l.min(g) - 1e-12 && r.score <= l.max(g) + 1e-12);
            }
        }
    }
}
