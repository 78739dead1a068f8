//! Dense numerical primitives: normalization, k-means, PCA.
//!
//! Vectors are plain `f64` slices; matrices are row-major `Vec<Vec<f64>>`.
//! Every training routine is single-threaded in its control flow and fully
//! determined by its seed; the only parallel section (nearest-centroid
//! assignment) is a pure per-point map.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::Descriptor;
use crate::rng::Rng;

/// Below this norm a vector is treated as zero and left untouched.
pub const NORM_EPS: f64 = 1e-12;

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > NORM_EPS {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// `m · v` for a row-major matrix.
pub fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// `mᵀ · v` for a row-major matrix.
pub fn mat_t_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let cols = m.first().map_or(0, Vec::len);
    let mut out = vec![0.0; cols];
    for (row, &s) in m.iter().zip(v) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += r * s;
        }
    }
    out
}

fn check_uniform_dim(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points have inconsistent dimensions"));
    }
    Ok(dim)
}

/// Number of pairwise-distinct points (bitwise comparison).
pub fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

// ---------------------------------------------------------------------------
// k-means

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances of the training points to their centroid.
    pub inertia: f64,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest centroid and its squared distance; ties go to the lower index.
    pub fn assign(&self, point: &[f64]) -> Result<(usize, f64)> {
        if point.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point dimension {} != model dimension {}",
                point.len(),
                self.dim()
            )));
        }
        Ok(nearest(&self.centroids, point))
    }
}

pub fn kmeans_assign(model: &KMeansModel, point: &[f64]) -> Result<(usize, f64)> {
    model.assign(point)
}

fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_all(centroids: &[Vec<f64>], points: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .par_iter()
        .with_min_len(256)
        .map(|p| nearest(centroids, p))
        .unzip()
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_train(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<KMeansModel> {
    kmeans_train_traced(points, k, max_iters, seed).map(|(m, _)| m)
}

/// Same as [`kmeans_train`] but also returns the inertia after the initial
/// assignment and after every Lloyd iteration.
pub fn kmeans_train_traced(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(KMeansModel, Vec<f64>)> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let dim = check_uniform_dim(points)?;
    let mut rng = Rng::new(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);

    let (mut assignment, mut dists) = assign_all(&centroids, points);
    let mut trace = vec![dists.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s / n).collect();
            } else {
                // reseed an empty cluster on the worst-served point
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .fold(None::<usize>, |best, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("points.len() >= k");
                taken[far] = true;
                centroids[c] = points[far].clone();
                dists[far] = 0.0;
            }
        }
        let (next, next_dists) = assign_all(&centroids, points);
        trace.push(next_dists.iter().sum());
        let converged = next == assignment;
        assignment = next;
        dists = next_dists;
        if converged {
            break;
        }
    }
    let inertia = *trace.last().expect("trace non-empty");
    Ok((KMeansModel { centroids, inertia }, trace))
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.below(n);
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points
        .par_iter()
        .with_min_len(256)
        .map(|p| squared_distance(p, &points[first]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the accumulated total
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.below(n)
        };
        let c = points[pick].clone();
        d2.par_iter_mut()
            .with_min_len(256)
            .zip(points.par_iter())
            .for_each(|(d, p)| {
                let nd = squared_distance(p, &c);
                if nd < *d {
                    *d = nd;
                }
            });
        centroids.push(c);
    }
    centroids
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as rows.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = identity(n);
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off <= scale * 1e-30 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|r| v[r][i]).collect())
        .collect();
    (values, vectors)
}

pub fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Flip `row` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(row: &mut [f64]) {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.abs() > row[best].abs() {
            best = i;
        }
    }
    if row.get(best).is_some_and(|&v| v < 0.0) {
        row.iter_mut().for_each(|v| *v = -*v);
    }
}

// ---------------------------------------------------------------------------
// PCA

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `out_dim` orthonormal rows of length `d`.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "vector dimension {} != PCA input dimension {}",
                v.len(),
                self.input_dim()
            )));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(mat_vec(&self.components, &centered))
    }

    pub fn reconstruct(&self, projected: &[f64]) -> Vec<f64> {
        let mut out = mat_t_vec(&self.components, projected);
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o += m;
        }
        out
    }
}

/// Mean, eigenvalues and sign-normalized principal axes of `points`, full
/// basis. Works for any non-empty point set, including rank-deficient ones.
pub(crate) fn principal_axes(points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    if points.is_empty() {
        return Err(Error::invalid("PCA needs at least one point"));
    }
    let dim = check_uniform_dim(points)?;
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = vec![vec![0.0; dim]; dim];
    let mut centered = vec![0.0; dim];
    for p in points {
        for ((c, v), m) in centered.iter_mut().zip(p).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[i][j] += ci * centered[j];
            }
        }
    }
    let denom = if points.len() > 1 { n - 1.0 } else { 1.0 };
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    let (values, mut vectors) = symmetric_eigen(&cov);
    vectors.iter_mut().for_each(|r| fix_sign(r));
    Ok((mean, values, vectors))
}

pub fn pca_train(points: &[Vec<f64>], out_dim: usize) -> Result<PcaModel> {
    let dim = check_uniform_dim(points)?;
    if out_dim == 0 || out_dim > dim {
        return Err(Error::invalid(format!(
            "PCA output dimension must be in 1..={dim}, got {out_dim}"
        )));
    }
    if points.len() <= out_dim {
        return Err(Error::invalid(format!(
            "PCA to {out_dim} dimensions needs more than {out_dim} points, got {}",
            points.len()
        )));
    }
    let (mean, values, vectors) = principal_axes(points)?;
    Ok(PcaModel {
        mean,
        components: vectors.into_iter().take(out_dim).collect(),
        explained_variance: values.into_iter().take(out_dim).map(|v| v.max(0.0)).collect(),
    })
}

pub fn pca_project(model: &PcaModel, v: &[f64]) -> Result<Vec<f64>> {
    model.project(v)
}

/// Normalize, project, normalize again. A zero raw descriptor maps to the
/// zero vector instead of to the projected mean.
pub fn reduce_descriptor(model: &PcaModel, raw: &Descriptor) -> Result<Descriptor> {
    if raw.dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "descriptor dimension {} != PCA input dimension {}",
            raw.dim(),
            model.input_dim()
        )));
    }
    if norm(raw.as_slice()) <= NORM_EPS {
        return Ok(Descriptor(vec![0.0; model.output_dim()]));
    }
    let projected = model.project(&l2_normalize(raw.as_slice()))?;
    Ok(Descriptor(l2_normalize(&projected)))
}
