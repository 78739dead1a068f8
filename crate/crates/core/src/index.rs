//! Inverted-file index over PQ-coded local descriptors.
//!
//! Database descriptors are hard-assigned to the nearest centroid of a
//! coarse k-means codebook. Each non-empty cell is partitioned by a KD-tree
//! on the residuals (median split on the highest-variance dimension) until
//! every leaf holds at most `kd_leaf_max` postings, and each leaf gets its
//! own rotated residual quantizer. Leaves too small to train one share a
//! global residual quantizer instead.
//!
//! A query probes its `soft_assign` nearest cells, walks each cell's tree
//! best-first by the lower bound on the residual's distance to every
//! subtree, and scores postings with asymmetric distances until the global
//! leaf budget runs out.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature::ImageFeatures;
use crate::linalg::{self, KMeansModel, PcaModel};
use crate::matcher::Correspondence;
use crate::quantizer::{self, LocalPq, ProductQuantizer};
use crate::rng::Rng;

pub const DEFAULT_COARSE_K: usize = 8192;
pub const DEFAULT_KD_LEAF_MAX: usize = 30_000;
pub const DEFAULT_DESCRIPTOR_DIM: usize = 40;
pub const DEFAULT_SOFT_ASSIGN: usize = 5;
pub const DEFAULT_LEAF_BUDGET: usize = 10_000;
pub const DEFAULT_TOP_K: usize = 60;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IndexConfig {
    pub coarse_k: usize,
    pub kd_leaf_max: usize,
    pub pq_m: usize,
    pub pq_bits: u32,
    pub descriptor_dim: usize,
    pub kmeans_iters: usize,
    pub pq_iters: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            coarse_k: DEFAULT_COARSE_K,
            kd_leaf_max: DEFAULT_KD_LEAF_MAX,
            pq_m: quantizer::DEFAULT_PQ_M,
            pq_bits: quantizer::DEFAULT_PQ_BITS,
            descriptor_dim: DEFAULT_DESCRIPTOR_DIM,
            kmeans_iters: 20,
            pq_iters: 15,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_k == 0 || self.kd_leaf_max == 0 || self.pq_m == 0 || self.descriptor_dim == 0 {
            return Err(Error::invalid("index config counts must be positive"));
        }
        if self.pq_bits == 0 || self.pq_bits > quantizer::MAX_PQ_BITS {
            return Err(Error::invalid(format!(
                "pq_bits must be in 1..={}",
                quantizer::MAX_PQ_BITS
            )));
        }
        if self.descriptor_dim % self.pq_m != 0 {
            return Err(Error::invalid(format!(
                "descriptor_dim {} not divisible by pq_m {}",
                self.descriptor_dim, self.pq_m
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchParams {
    pub soft_assign: usize,
    pub leaf_budget: usize,
    pub top_k: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            soft_assign: DEFAULT_SOFT_ASSIGN,
            leaf_budget: DEFAULT_LEAF_BUDGET,
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.soft_assign == 0 || self.leaf_budget == 0 || self.top_k == 0 {
            return Err(Error::invalid("search parameters must all be at least 1"));
        }
        Ok(())
    }
}

/// Reference from a leaf entry back to the database feature it encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Posting {
    /// Position in the index's image table (sorted by image id).
    pub image: u32,
    pub feature_ordinal: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LeafQuantizer {
    Local(LocalPq),
    /// Leaf uses the index-wide residual quantizer.
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub quantizer: LeafQuantizer,
    pub postings: Vec<Posting>,
    /// Packed codes, `code_bytes` per posting, in posting order.
    pub codes: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KdNode {
    Split {
        dim: u32,
        value: f64,
        left: u32,
        right: u32,
    },
    Leaf(u32),
}

/// KD-tree over one coarse cell; `nodes` is in pre-order with the root
/// first. Empty cells have no nodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KdCellTree {
    pub nodes: Vec<KdNode>,
    pub leaves: Vec<Leaf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub image_id: String,
    pub locations: Vec<[f64; 2]>,
    pub scales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub config: IndexConfig,
    pub pca: Option<PcaModel>,
    pub coarse: KMeansModel,
    pub global: Option<LocalPq>,
    pub cells: Vec<KdCellTree>,
    pub images: Vec<ImageEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchHit {
    pub posting: Posting,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BuildStats {
    pub descriptors: usize,
    pub images: usize,
    pub coarse_k: usize,
    pub nonempty_cells: usize,
    pub leaves: usize,
    pub local_quantizer_leaves: usize,
    pub global_quantizer_leaves: usize,
    pub max_leaf_postings: usize,
    pub code_bits: usize,
    pub code_bytes: usize,
    /// Code plus posting reference (image and ordinal, 4 bytes each).
    pub bytes_per_descriptor: usize,
    /// `(upper bound, count)`: leaves with postings in `(prev bound, bound]`.
    pub leaf_histogram: Vec<(usize, usize)>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn round_kmeans(model: &mut KMeansModel) {
    model.centroids.iter_mut().flatten().for_each(|v| *v = f32_round(*v));
    model.inertia = f32_round(model.inertia);
}

/// Rounds a PCA model to `f32` precision so it survives the index file.
pub fn round_pca(model: &mut PcaModel) {
    model.mean.iter_mut().for_each(|v| *v = f32_round(*v));
    model.components.iter_mut().flatten().for_each(|v| *v = f32_round(*v));
    model.explained_variance.iter_mut().for_each(|v| *v = f32_round(*v));
}

// ---------------------------------------------------------------------------
// Build

pub fn build_index(corpus: &[ImageFeatures], config: &IndexConfig, seed: u64) -> Result<RetrievalIndex> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build an index from an empty corpus"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| corpus[a].image_id.cmp(&corpus[b].image_id));
    for w in order.windows(2) {
        if corpus[w[0]].image_id == corpus[w[1]].image_id {
            return Err(Error::invalid(format!(
                "duplicate image id {:?}",
                corpus[w[0]].image_id
            )));
        }
    }

    let dim = config.descriptor_dim;
    let mut images = Vec::with_capacity(corpus.len());
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut postings: Vec<Posting> = Vec::new();
    for (image_idx, &i) in order.iter().enumerate() {
        let img = &corpus[i];
        let mut entry = ImageEntry {
            image_id: img.image_id.clone(),
            locations: Vec::with_capacity(img.features.len()),
            scales: Vec::with_capacity(img.features.len()),
        };
        for (ordinal, f) in img.features.iter().enumerate() {
            if f.descriptor.dim() != dim {
                return Err(Error::invalid(format!(
                    "image {}: descriptor dimension {} != index dimension {dim}",
                    img.image_id,
                    f.descriptor.dim()
                )));
            }
            entry.locations.push([f32_round(f.x), f32_round(f.y)]);
            entry.scales.push(f32_round(f.scale));
            points.push(f.descriptor.0.clone());
            postings.push(Posting {
                image: image_idx as u32,
                feature_ordinal: ordinal as u32,
            });
        }
        images.push(entry);
    }
    if points.is_empty() {
        return Err(Error::invalid("corpus contains no features"));
    }
    u32::try_from(images.len()).map_err(|_| Error::invalid("too many images"))?;

    let k = config.coarse_k.min(linalg::count_distinct(&points));
    let mut coarse = linalg::kmeans_train(&points, k, config.kmeans_iters, seed)?;
    round_kmeans(&mut coarse);
    log::debug!("coarse codebook trained: k={k}, inertia={}", coarse.inertia);

    let assignment: Vec<usize> = points
        .par_iter()
        .with_min_len(256)
        .map(|p| coarse.assign(p).map(|(c, _)| c))
        .collect::<Result<_>>()?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }
    let residuals: Vec<Vec<f64>> = points
        .iter()
        .zip(&assignment)
        .map(|(p, &c)| quantizer::residual(p, &coarse.centroids[c]))
        .collect();

    // partition every cell first so we know whether a shared quantizer is needed
    let ksub = 1usize << config.pq_bits;
    let shapes: Vec<(Vec<KdNode>, Vec<Vec<usize>>)> = members
        .par_iter()
        .map(|m| partition_cell(m, &residuals, config.kd_leaf_max))
        .collect();
    let needs_global = shapes
        .iter()
        .flat_map(|(_, leaves)| leaves)
        .any(|l| l.len() < ksub);

    let global = if needs_global {
        let mut training: Vec<Vec<f64>> = residuals.clone();
        // tiny corpora: cycle the residuals up to one codebook's worth
        let n = training.len();
        for i in n..ksub {
            training.push(residuals[i % n].clone());
        }
        let pq = quantizer::pq_train(
            &training,
            config.pq_m,
            config.pq_bits,
            config.pq_iters,
            Rng::derive(seed, u64::MAX).next_u64(),
        )?;
        let mut g = LocalPq::unrotated(pq);
        g.round_to_f32();
        Some(g)
    } else {
        None
    };

    let cells: Vec<KdCellTree> = shapes
        .into_par_iter()
        .enumerate()
        .map(|(cell, (nodes, leaf_members))| {
            let leaves = leaf_members
                .iter()
                .enumerate()
                .map(|(leaf_idx, idx)| {
                    build_leaf(
                        idx,
                        &residuals,
                        &postings,
                        config,
                        global.as_ref(),
                        leaf_seed(seed, cell, leaf_idx),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(KdCellTree { nodes, leaves })
        })
        .collect::<Result<_>>()?;

    Ok(RetrievalIndex {
        config: config.clone(),
        pca: None,
        coarse,
        global,
        cells,
        images,
    })
}

fn leaf_seed(seed: u64, cell: usize, leaf: usize) -> u64 {
    Rng::derive(seed, ((cell as u64) << 32) | leaf as u64).next_u64()
}

fn build_leaf(
    idx: &[usize],
    residuals: &[Vec<f64>],
    postings: &[Posting],
    config: &IndexConfig,
    global: Option<&LocalPq>,
    seed: u64,
) -> Result<Leaf> {
    let vectors: Vec<Vec<f64>> = idx.iter().map(|&i| residuals[i].clone()).collect();
    let zero = vec![0.0; config.descriptor_dim];
    let (quantizer, encoder) = if vectors.len() >= 1 << config.pq_bits {
        let mut local = quantizer::lopq_train(
            &vectors,
            &zero,
            config.pq_m,
            config.pq_bits,
            config.pq_iters,
            seed,
        )?;
        local.round_to_f32();
        (LeafQuantizer::Local(local.clone()), local)
    } else {
        let g = global.ok_or_else(|| Error::State("small leaf without a shared quantizer".into()))?;
        (LeafQuantizer::Global, g.clone())
    };
    let mut codes = Vec::with_capacity(vectors.len() * encoder.pq.code_bytes());
    for v in &vectors {
        codes.extend_from_slice(encoder.encode_residual(v)?.bytes());
    }
    Ok(Leaf {
        quantizer,
        postings: idx.iter().map(|&i| postings[i]).collect(),
        codes,
    })
}

/// Recursively splits the cell's members; returns pre-order nodes and the
/// member list of each leaf.
fn partition_cell(
    members: &[usize],
    residuals: &[Vec<f64>],
    leaf_max: usize,
) -> (Vec<KdNode>, Vec<Vec<usize>>) {
    let mut nodes = Vec::new();
    let mut leaves = Vec::new();
    if !members.is_empty() {
        split_node(members.to_vec(), residuals, leaf_max, &mut nodes, &mut leaves);
    }
    (nodes, leaves)
}

fn split_node(
    members: Vec<usize>,
    residuals: &[Vec<f64>],
    leaf_max: usize,
    nodes: &mut Vec<KdNode>,
    leaves: &mut Vec<Vec<usize>>,
) -> u32 {
    let me = nodes.len() as u32;
    let split = if members.len() > leaf_max {
        choose_split(&members, residuals)
    } else {
        None
    };
    match split {
        None => {
            nodes.push(KdNode::Leaf(leaves.len() as u32));
            leaves.push(members);
        }
        Some((dim, value, left, right)) => {
            nodes.push(KdNode::Split {
                dim: dim as u32,
                value,
                left: 0,
                right: 0,
            });
            let l = split_node(left, residuals, leaf_max, nodes, leaves);
            let r = split_node(right, residuals, leaf_max, nodes, leaves);
            nodes[me as usize] = KdNode::Split {
                dim: dim as u32,
                value,
                left: l,
                right: r,
            };
        }
    }
    me
}

type Split = (usize, f64, Vec<usize>, Vec<usize>);

fn choose_split(members: &[usize], residuals: &[Vec<f64>]) -> Option<Split> {
    let dim = residuals[members[0]].len();
    let n = members.len() as f64;
    let mut best = (0usize, 0.0f64);
    for d in 0..dim {
        let mean = members.iter().map(|&i| residuals[i][d]).sum::<f64>() / n;
        let var = members
            .iter()
            .map(|&i| (residuals[i][d] - mean).powi(2))
            .sum::<f64>()
            / n;
        if var > best.1 {
            best = (d, var);
        }
    }
    if best.1 <= 0.0 {
        // identical residuals cannot be separated
        return None;
    }
    let d = best.0;
    let mut sorted = members.to_vec();
    sorted.sort_by(|&a, &b| residuals[a][d].total_cmp(&residuals[b][d]).then(a.cmp(&b)));
    let half = sorted.len() / 2;
    let value = f32_round(0.5 * (residuals[sorted[half - 1]][d] + residuals[sorted[half]][d]));
    let right = sorted.split_off(half);
    Some((d, value, sorted, right))
}

// ---------------------------------------------------------------------------
// Search

/// `t` nearest coarse centroids, ascending by squared distance, ties to the
/// lower id. `t` is clamped to the codebook size.
pub fn soft_assign(coarse: &KMeansModel, query: &[f64], t: usize) -> Result<Vec<(usize, f64)>> {
    if query.len() != coarse.dim() {
        return Err(Error::invalid(format!(
            "query dimension {} != codebook dimension {}",
            query.len(),
            coarse.dim()
        )));
    }
    let mut all: Vec<(usize, f64)> = coarse
        .centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, linalg::squared_distance(c, query)))
        .collect();
    let t = t.min(all.len());
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if t < all.len() && t > 0 {
        all.select_nth_unstable_by(t - 1, cmp);
        all.truncate(t);
    }
    all.sort_by(cmp);
    all.truncate(t);
    Ok(all)
}

/// Max-heap entry ordered by (distance, image, ordinal).
#[derive(Clone, Copy, Debug, PartialEq)]
struct Ranked(SearchHit);

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .distance
            .total_cmp(&other.0.distance)
            .then(self.0.posting.cmp(&other.0.posting))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded collection of the best hits seen so far.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub(crate) fn push(&mut self, hit: SearchHit) {
        let r = Ranked(hit);
        if self.heap.len() < self.k {
            self.heap.push(r);
        } else if let Some(worst) = self.heap.peek() {
            if r < *worst {
                self.heap.pop();
                self.heap.push(r);
            }
        }
    }

    pub(crate) fn into_sorted(self) -> Vec<SearchHit> {
        self.heap.into_sorted_vec().into_iter().map(|r| r.0).collect()
    }
}

/// Min-heap entry for best-first tree descent.
struct Frontier {
    bound: f64,
    node: u32,
    gaps: Vec<f64>,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl RetrievalIndex {
    pub fn with_pca(mut self, pca: PcaModel) -> Self {
        self.pca = Some(pca);
        self
    }

    pub fn num_postings(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| &c.leaves)
            .map(|l| l.postings.len())
            .sum()
    }

    pub fn num_leaves(&self) -> usize {
        self.cells.iter().map(|c| c.leaves.len()).sum()
    }

    pub fn code_bytes(&self) -> usize {
        quantizer::code_bytes(self.config.pq_m, self.config.pq_bits)
    }

    pub fn image_id(&self, image: u32) -> &str {
        &self.images[image as usize].image_id
    }

    pub fn location(&self, posting: Posting) -> [f64; 2] {
        self.images[posting.image as usize].locations[posting.feature_ordinal as usize]
    }

    pub fn leaf_quantizer<'a>(&'a self, leaf: &'a Leaf) -> Result<&'a LocalPq> {
        match &leaf.quantizer {
            LeafQuantizer::Local(q) => Ok(q),
            LeafQuantizer::Global => self
                .global
                .as_ref()
                .ok_or_else(|| Error::State("leaf refers to a missing shared quantizer".into())),
        }
    }

    pub fn stats(&self) -> BuildStats {
        let sizes: Vec<usize> = self
            .cells
            .iter()
            .flat_map(|c| &c.leaves)
            .map(|l| l.postings.len())
            .collect();
        let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
        for &s in &sizes {
            *histogram.entry(s.next_power_of_two()).or_default() += 1;
        }
        let global_leaves = self
            .cells
            .iter()
            .flat_map(|c| &c.leaves)
            .filter(|l| l.quantizer == LeafQuantizer::Global)
            .count();
        let code_bytes = self.code_bytes();
        BuildStats {
            descriptors: sizes.iter().sum(),
            images: self.images.len(),
            coarse_k: self.coarse.k(),
            nonempty_cells: self.cells.iter().filter(|c| !c.leaves.is_empty()).count(),
            leaves: sizes.len(),
            local_quantizer_leaves: sizes.len() - global_leaves,
            global_quantizer_leaves: global_leaves,
            max_leaf_postings: sizes.iter().copied().max().unwrap_or(0),
            code_bits: self.config.pq_m * self.config.pq_bits as usize,
            code_bytes,
            bytes_per_descriptor: code_bytes + 8,
            leaf_histogram: histogram.into_iter().collect(),
        }
    }

    /// Approximate nearest database features of one reduced descriptor,
    /// best first.
    pub fn search_descriptor(&self, query: &[f64], params: &SearchParams) -> Result<Vec<SearchHit>> {
        params.validate()?;
        if self.coarse.k() == 0 || self.cells.is_empty() {
            return Err(Error::State("index has not been built".into()));
        }
        if query.len() != self.config.descriptor_dim {
            return Err(Error::invalid(format!(
                "query dimension {} != index dimension {}",
                query.len(),
                self.config.descriptor_dim
            )));
        }
        let mut budget = params.leaf_budget;
        let mut top = TopK::new(params.top_k);
        for (cell_id, _) in soft_assign(&self.coarse, query, params.soft_assign)? {
            if budget == 0 {
                break;
            }
            let tree = &self.cells[cell_id];
            if tree.nodes.is_empty() {
                continue;
            }
            let residual = quantizer::residual(query, &self.coarse.centroids[cell_id]);
            let mut frontier = BinaryHeap::new();
            frontier.push(Frontier {
                bound: 0.0,
                node: 0,
                gaps: vec![0.0; residual.len()],
            });
            while let Some(Frontier { bound, node, gaps }) = frontier.pop() {
                match tree.nodes[node as usize] {
                    KdNode::Leaf(leaf_idx) => {
                        let leaf = &tree.leaves[leaf_idx as usize];
                        self.scan_leaf(leaf, &residual, &mut top)?;
                        budget -= 1;
                        if budget == 0 {
                            break;
                        }
                    }
                    KdNode::Split {
                        dim,
                        value,
                        left,
                        right,
                    } => {
                        let d = dim as usize;
                        let diff = residual[d] - value;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        let mut far_gaps = gaps.clone();
                        far_gaps[d] = diff * diff;
                        let far_bound = bound - gaps[d] + far_gaps[d];
                        frontier.push(Frontier {
                            bound,
                            node: near,
                            gaps,
                        });
                        frontier.push(Frontier {
                            bound: far_bound,
                            node: far,
                            gaps: far_gaps,
                        });
                    }
                }
            }
        }
        Ok(top.into_sorted())
    }

    fn scan_leaf(&self, leaf: &Leaf, residual: &[f64], top: &mut TopK) -> Result<()> {
        let q = self.leaf_quantizer(leaf)?;
        let table = q.adc_table_for_residual(residual)?;
        let stride = q.pq.code_bytes();
        for (posting, code) in leaf.postings.iter().zip(leaf.codes.chunks_exact(stride)) {
            top.push(SearchHit {
                posting: *posting,
                distance: table.distance(code),
            });
        }
        Ok(())
    }

    /// Runs every query feature through the index and groups the hits by
    /// database image as location correspondences.
    pub fn search_image(
        &self,
        query: &ImageFeatures,
        params: &SearchParams,
    ) -> Result<BTreeMap<String, Vec<Correspondence>>> {
        let mut out: BTreeMap<String, Vec<Correspondence>> = BTreeMap::new();
        for f in &query.features {
            for hit in self.search_descriptor(f.descriptor.as_slice(), params)? {
                out.entry(self.image_id(hit.posting.image).to_string())
                    .or_default()
                    .push(Correspondence {
                        query_point: f.location(),
                        db_point: self.location(hit.posting),
                    });
            }
        }
        Ok(out)
    }
}

pub fn search_descriptor(index: &RetrievalIndex, query: &[f64], params: &SearchParams) -> Result<Vec<SearchHit>> {
    index.search_descriptor(query, params)
}

pub fn search_image(
    index: &RetrievalIndex,
    query: &ImageFeatures,
    params: &SearchParams,
) -> Result<BTreeMap<String, Vec<Correspondence>>> {
    index.search_image(query, params)
}

// ---------------------------------------------------------------------------
// Persistence

pub const INDEX_MAGIC: [u8; 4] = *b"DIDX";
pub const INDEX_VERSION: u32 = 1;

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: usize) -> Result<()> {
        self.bytes(&(v as u64).to_le_bytes())
    }
    fn f32(&mut self, v: f64) -> Result<()> {
        self.bytes(&(v as f32).to_le_bytes())
    }
    fn f32s(&mut self, vs: &[f64]) -> Result<()> {
        vs.iter().try_for_each(|&v| self.f32(v))
    }
    fn matrix(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        rows.iter().try_for_each(|r| self.f32s(r))
    }
}

struct Reader<R: Read> {
    input: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, buf: &mut [u8], field: &'static str) -> Result<()> {
        self.input.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(field, "truncated index file")
            } else {
                Error::Io(e)
            }
        })
    }
    fn u8(&mut self, field: &'static str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b, field)?;
        Ok(b[0])
    }
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self, field: &'static str) -> Result<usize> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, field)?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::format(field, "count overflows"))
    }
    /// A count that must not exceed `limit` (guards allocations).
    fn count(&mut self, field: &'static str, limit: usize) -> Result<usize> {
        let n = self.u64(field)?;
        if n > limit {
            return Err(Error::format(field, format!("count {n} exceeds limit {limit}")));
        }
        Ok(n)
    }
    fn f32(&mut self, field: &'static str) -> Result<f64> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, field)?;
        Ok(f32::from_le_bytes(b) as f64)
    }
    fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n * 4];
        self.bytes(&mut raw, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize, field: &'static str) -> Result<Vec<Vec<f64>>> {
        (0..rows).map(|_| self.f32s(cols, field)).collect()
    }
}

const MAX_DIM: usize = 1 << 16;
const MAX_COUNT: usize = 1 << 40;

fn write_local_pq<W: Write>(w: &mut Writer<W>, q: &LocalPq) -> Result<()> {
    w.u64(q.dim())?;
    w.matrix(&q.rotation)?;
    w.u64(q.pq.m)?;
    w.u32(q.pq.bits)?;
    w.u64(q.pq.sub_dim)?;
    for book in &q.pq.codebooks {
        w.matrix(book)?;
    }
    Ok(())
}

fn read_local_pq<R: Read>(r: &mut Reader<R>) -> Result<LocalPq> {
    let dim = r.count("quantizer dimension", MAX_DIM)?;
    let rotation = r.matrix(dim, dim, "quantizer rotation")?;
    let m = r.count("quantizer m", MAX_DIM)?;
    let bits = r.u32("quantizer bits")?;
    if bits == 0 || bits > quantizer::MAX_PQ_BITS {
        return Err(Error::format("quantizer bits", format!("{bits} out of range")));
    }
    let sub_dim = r.count("quantizer sub_dim", MAX_DIM)?;
    if m * sub_dim != dim {
        return Err(Error::format("quantizer m", "m × sub_dim != dimension"));
    }
    let codebooks = (0..m)
        .map(|_| r.matrix(1 << bits, sub_dim, "quantizer codebook"))
        .collect::<Result<_>>()?;
    Ok(LocalPq {
        rotation,
        pq: ProductQuantizer {
            m,
            bits,
            sub_dim,
            codebooks,
        },
    })
}

/// Serializes the index: magic `DIDX`, u32 version, then config, optional
/// PCA, coarse codebook, optional shared quantizer, image table and cells.
/// Little-endian; counts u64; real numbers f32.
pub fn write_index<W: Write>(index: &RetrievalIndex, out: W) -> Result<()> {
    let mut w = Writer { out };
    w.bytes(&INDEX_MAGIC)?;
    w.u32(INDEX_VERSION)?;
    let c = &index.config;
    w.u64(c.coarse_k)?;
    w.u64(c.kd_leaf_max)?;
    w.u64(c.pq_m)?;
    w.u32(c.pq_bits)?;
    w.u64(c.descriptor_dim)?;
    w.u64(c.kmeans_iters)?;
    w.u64(c.pq_iters)?;

    match &index.pca {
        None => w.u8(0)?,
        Some(p) => {
            w.u8(1)?;
            w.u64(p.input_dim())?;
            w.u64(p.output_dim())?;
            w.f32s(&p.mean)?;
            w.matrix(&p.components)?;
            w.f32s(&p.explained_variance)?;
        }
    }

    w.u64(index.coarse.k())?;
    w.u64(index.coarse.dim())?;
    w.f32(index.coarse.inertia)?;
    w.matrix(&index.coarse.centroids)?;

    match &index.global {
        None => w.u8(0)?,
        Some(g) => {
            w.u8(1)?;
            write_local_pq(&mut w, g)?;
        }
    }

    w.u64(index.images.len())?;
    for img in &index.images {
        w.u64(img.image_id.len())?;
        w.bytes(img.image_id.as_bytes())?;
        w.u64(img.locations.len())?;
        for (loc, s) in img.locations.iter().zip(&img.scales) {
            w.f32s(&[loc[0], loc[1], *s])?;
        }
    }

    w.u64(index.cells.len())?;
    for cell in &index.cells {
        w.u64(cell.nodes.len())?;
        for node in &cell.nodes {
            match *node {
                KdNode::Split {
                    dim,
                    value,
                    left,
                    right,
                } => {
                    w.u8(0)?;
                    w.u32(dim)?;
                    w.f32(value)?;
                    w.u64(left as usize)?;
                    w.u64(right as usize)?;
                }
                KdNode::Leaf(leaf) => {
                    w.u8(1)?;
                    w.u64(leaf as usize)?;
                }
            }
        }
        w.u64(cell.leaves.len())?;
        for leaf in &cell.leaves {
            match &leaf.quantizer {
                LeafQuantizer::Global => w.u8(0)?,
                LeafQuantizer::Local(q) => {
                    w.u8(1)?;
                    write_local_pq(&mut w, q)?;
                }
            }
            w.u64(leaf.postings.len())?;
            for p in &leaf.postings {
                w.u32(p.image)?;
                w.u32(p.feature_ordinal)?;
            }
            w.bytes(&leaf.codes)?;
        }
    }
    w.out.flush()?;
    Ok(())
}

pub fn read_index<R: Read>(input: R) -> Result<RetrievalIndex> {
    let mut r = Reader { input };
    let mut magic = [0u8; 4];
    r.bytes(&mut magic, "index magic")?;
    if magic != INDEX_MAGIC {
        return Err(Error::BadMagic {
            field: "index magic",
            expected: INDEX_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("index version")?;
    if version != INDEX_VERSION {
        return Err(Error::UnsupportedVersion {
            field: "index",
            expected: INDEX_VERSION,
            found: version,
        });
    }
    let config = IndexConfig {
        coarse_k: r.u64("config.coarse_k")?,
        kd_leaf_max: r.u64("config.kd_leaf_max")?,
        pq_m: r.u64("config.pq_m")?,
        pq_bits: r.u32("config.pq_bits")?,
        descriptor_dim: r.u64("config.descriptor_dim")?,
        kmeans_iters: r.u64("config.kmeans_iters")?,
        pq_iters: r.u64("config.pq_iters")?,
    };
    config
        .validate()
        .map_err(|e| Error::format("config", e.to_string()))?;
    let dim = config.descriptor_dim;
    if dim > MAX_DIM {
        return Err(Error::format("config.descriptor_dim", "too large"));
    }

    let pca = match r.u8("pca flag")? {
        0 => None,
        1 => {
            let input_dim = r.count("pca input dimension", MAX_DIM)?;
            let output_dim = r.count("pca output dimension", MAX_DIM)?;
            if output_dim != dim {
                return Err(Error::format("pca output dimension", "does not match descriptor_dim"));
            }
            Some(PcaModel {
                mean: r.f32s(input_dim, "pca mean")?,
                components: r.matrix(output_dim, input_dim, "pca components")?,
                explained_variance: r.f32s(output_dim, "pca variance")?,
            })
        }
        f => return Err(Error::format("pca flag", format!("unexpected value {f}"))),
    };

    let k = r.count("coarse k", MAX_COUNT)?;
    let coarse_dim = r.u64("coarse dimension")?;
    if coarse_dim != dim || k == 0 {
        return Err(Error::format("coarse codebook", "shape does not match config"));
    }
    let inertia = r.f32("coarse inertia")?;
    let coarse = KMeansModel {
        centroids: r.matrix(k, dim, "coarse centroids")?,
        inertia,
    };

    let check_pq = |q: &LocalPq| -> Result<()> {
        if q.dim() != dim || q.pq.m != config.pq_m || q.pq.bits != config.pq_bits {
            return Err(Error::format("quantizer", "shape does not match config"));
        }
        Ok(())
    };
    let global = match r.u8("shared quantizer flag")? {
        0 => None,
        1 => {
            let q = read_local_pq(&mut r)?;
            check_pq(&q)?;
            Some(q)
        }
        f => return Err(Error::format("shared quantizer flag", format!("unexpected value {f}"))),
    };

    let n_images = r.count("image count", u32::MAX as usize)?;
    let mut images = Vec::with_capacity(n_images.min(1 << 20));
    for _ in 0..n_images {
        let len = r.count("image id length", 1 << 16)?;
        let mut id = vec![0u8; len];
        r.bytes(&mut id, "image id")?;
        let image_id =
            String::from_utf8(id).map_err(|_| Error::format("image id", "not UTF-8"))?;
        let n = r.count("image feature count", u32::MAX as usize)?;
        let raw = r.f32s(3 * n, "image feature locations")?;
        images.push(ImageEntry {
            image_id,
            locations: raw.chunks_exact(3).map(|c| [c[0], c[1]]).collect(),
            scales: raw.chunks_exact(3).map(|c| c[2]).collect(),
        });
    }

    let code_bytes = quantizer::code_bytes(config.pq_m, config.pq_bits);
    let n_cells = r.count("cell count", MAX_COUNT)?;
    if n_cells != k {
        return Err(Error::format("cell count", "does not match coarse k"));
    }
    let mut cells = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        let n_nodes = r.count("node count", MAX_COUNT)?;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
        for _ in 0..n_nodes {
            nodes.push(match r.u8("node tag")? {
                0 => KdNode::Split {
                    dim: r.u32("split dimension")?,
                    value: r.f32("split value")?,
                    left: r.count("split child", u32::MAX as usize)? as u32,
                    right: r.count("split child", u32::MAX as usize)? as u32,
                },
                1 => KdNode::Leaf(r.count("leaf reference", u32::MAX as usize)? as u32),
                t => return Err(Error::format("node tag", format!("unexpected value {t}"))),
            });
        }
        let n_leaves = r.count("leaf count", MAX_COUNT)?;
        let mut leaves = Vec::with_capacity(n_leaves.min(1 << 20));
        for _ in 0..n_leaves {
            let quantizer = match r.u8("leaf quantizer tag")? {
                0 => {
                    if global.is_none() {
                        return Err(Error::format("leaf quantizer tag", "shared quantizer missing"));
                    }
                    LeafQuantizer::Global
                }
                1 => {
                    let q = read_local_pq(&mut r)?;
                    check_pq(&q)?;
                    LeafQuantizer::Local(q)
                }
                t => return Err(Error::format("leaf quantizer tag", format!("unexpected value {t}"))),
            };
            let n = r.count("posting count", MAX_COUNT)?;
            let mut postings = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let p = Posting {
                    image: r.u32("posting image")?,
                    feature_ordinal: r.u32("posting ordinal")?,
                };
                let valid = images
                    .get(p.image as usize)
                    .is_some_and(|img: &ImageEntry| (p.feature_ordinal as usize) < img.locations.len());
                if !valid {
                    return Err(Error::format("posting", "refers to an unknown feature"));
                }
                postings.push(p);
            }
            let mut codes = vec![0u8; n * code_bytes];
            r.bytes(&mut codes, "posting codes")?;
            leaves.push(Leaf {
                quantizer,
                postings,
                codes,
            });
        }
        let tree = KdCellTree { nodes, leaves };
        validate_tree(&tree, dim)?;
        cells.push(tree);
    }
    let mut trailing = [0u8; 1];
    if r.input.read(&mut trailing)? != 0 {
        return Err(Error::format("index file", "trailing bytes after last cell"));
    }
    Ok(RetrievalIndex {
        config,
        pca,
        coarse,
        global,
        cells,
        images,
    })
}

fn validate_tree(tree: &KdCellTree, dim: usize) -> Result<()> {
    if tree.nodes.is_empty() != tree.leaves.is_empty() {
        return Err(Error::format("cell tree", "nodes and leaves disagree"));
    }
    let n = tree.nodes.len() as u32;
    let mut leaf_refs = vec![0u32; tree.leaves.len()];
    for (i, node) in tree.nodes.iter().enumerate() {
        match *node {
            KdNode::Split {
                dim: d,
                left,
                right,
                ..
            } => {
                // pre-order: children come after their parent
                if d as usize >= dim || left >= n || right >= n || left as usize <= i || right as usize <= i {
                    return Err(Error::format("cell tree", "split node out of range"));
                }
            }
            KdNode::Leaf(l) => match leaf_refs.get_mut(l as usize) {
                Some(c) => *c += 1,
                None => return Err(Error::format("cell tree", "leaf reference out of range")),
            },
        }
    }
    if leaf_refs.iter().any(|&c| c != 1) {
        return Err(Error::format("cell tree", "leaf referenced zero or multiple times"));
    }
    Ok(())
}

pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_index(index, std::io::BufWriter::new(file))
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    let file = std::fs::File::open(path)?;
    read_index(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{Descriptor, LocalFeature};

    fn corpus(rng: &mut Rng, images: usize, per_image: usize, dim: usize) -> Vec<ImageFeatures> {
        (0..images)
            .map(|i| {
                let fs = (0..per_image)
                    .map(|_| LocalFeature {
                        x: rng.uniform(0.0, 640.0),
                        y: rng.uniform(0.0, 480.0),
                        scale: 1.0,
                        score: 1.0,
                        descriptor: Descriptor((0..dim).map(|_| rng.normal()).collect()),
                    })
                    .collect();
                ImageFeatures::new(format!("img{i:04}"), fs)
            })
            .collect()
    }

    fn small_config() -> IndexConfig {
        IndexConfig {
            coarse_k: 8,
            kd_leaf_max: 100,
            pq_m: 4,
            pq_bits: 4,
            descriptor_dim: 8,
            kmeans_iters: 10,
            pq_iters: 8,
        }
    }

    #[test]
    fn single_feature_self_retrieval() {
        let img = ImageFeatures::new(
            "only",
            vec![LocalFeature {
                x: 10.0,
                y: 20.0,
                scale: 1.0,
                score: 1.0,
                descriptor: Descriptor(vec![0.5, -0.25, 0.125, 1.0, 0.0, 0.0, 0.75, -1.0]),
            }],
        );
        let index = build_index(&[img.clone()], &small_config(), 1).unwrap();
        assert_eq!(index.coarse.k(), 1);
        assert_eq!(index.num_leaves(), 1);
        assert_eq!(index.num_postings(), 1);
        let hits = index
            .search_descriptor(img.features[0].descriptor.as_slice(), &SearchParams::default())
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert!(hits[0].distance < 1e-12, "{}", hits[0].distance);
    }

    #[test]
    fn empty_corpus_and_bad_dims() {
        assert!(build_index(&[], &small_config(), 0).is_err());
        let mut rng = Rng::new(1);
        let c = corpus(&mut rng, 2, 5, 6);
        assert!(build_index(&c, &small_config(), 0).is_err());
        let mut cfg = small_config();
        cfg.pq_m = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn leaves_respect_capacity_and_conserve_postings() {
        let mut rng = Rng::new(2);
        let c = corpus(&mut rng, 40, 50, 8);
        let mut cfg = small_config();
        cfg.coarse_k = 4;
        cfg.kd_leaf_max = 60;
        let index = build_index(&c, &cfg, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        for cell in &index.cells {
            for leaf in &cell.leaves {
                assert!(leaf.postings.len() <= 60);
                assert_eq!(leaf.codes.len(), leaf.postings.len() * index.code_bytes());
                for p in &leaf.postings {
                    assert!(seen.insert(*p), "posting in two leaves");
                }
            }
        }
        assert_eq!(seen.len(), 2000);
        let stats = index.stats();
        assert_eq!(stats.descriptors, 2000);
        assert_eq!(stats.code_bytes, 2);
        assert!(stats.max_leaf_postings <= 60);
    }

    #[test]
    fn soft_assign_matches_brute_force() {
        let mut rng = Rng::new(3);
        let model = KMeansModel {
            centroids: (0..20).map(|_| (0..4).map(|_| rng.normal()).collect()).collect(),
            inertia: 0.0,
        };
        let exact = soft_assign(&model, &model.centroids[3].clone(), 1).unwrap();
        assert_eq!(exact, vec![(3, 0.0)]);
        let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let all = soft_assign(&model, &q, 20).unwrap();
        assert_eq!(all.len(), 20);
        assert!(all.windows(2).all(|w| w[0].1 <= w[1].1));
        for _ in 0..200 {
            let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let mut brute: Vec<(usize, f64)> = model
                .centroids
                .iter()
                .enumerate()
                .map(|(i, c)| (i, linalg::squared_distance(c, &q)))
                .collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            brute.truncate(5);
            assert_eq!(soft_assign(&model, &q, 5).unwrap(), brute);
        }
    }

    #[test]
    fn exhaustive_search_equals_adc_scan() {
        let mut rng = Rng::new(4);
        let c = corpus(&mut rng, 30, 40, 8);
        let mut cfg = small_config();
        cfg.kd_leaf_max = 50;
        let index = build_index(&c, &cfg, 5).unwrap();
        let params = SearchParams {
            soft_assign: index.coarse.k(),
            leaf_budget: index.num_leaves(),
            top_k: 25,
        };
        for _ in 0..30 {
            let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let got = index.search_descriptor(&q, &params).unwrap();
            let mut all = Vec::new();
            for (cell_id, cell) in index.cells.iter().enumerate() {
                let r = quantizer::residual(&q, &index.coarse.centroids[cell_id]);
                for leaf in &cell.leaves {
                    let lq = index.leaf_quantizer(leaf).unwrap();
                    let table = lq.adc_table_for_residual(&r).unwrap();
                    for (i, p) in leaf.postings.iter().enumerate() {
                        let code = quantizer::PqCode(leaf.codes[i * 2..i * 2 + 2].to_vec());
                        all.push((quantizer::adc_distance(&table, &code), *p));
                    }
                }
            }
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.truncate(25);
            let got: Vec<(f64, Posting)> = got.iter().map(|h| (h.distance, h.posting)).collect();
            assert_eq!(got, all);
        }
    }

    #[test]
    fn search_image_groups_hits() {
        let mut rng = Rng::new(6);
        let c = corpus(&mut rng, 10, 30, 8);
        let index = build_index(&c, &small_config(), 7).unwrap();
        let params = SearchParams {
            top_k: 5,
            ..SearchParams::default()
        };
        let groups = index.search_image(&c[3], &params).unwrap();
        let total: usize = groups.values().map(Vec::len).sum();
        let mut recount = 0;
        for f in &c[3].features {
            recount += index.search_descriptor(f.descriptor.as_slice(), &params).unwrap().len();
        }
        assert_eq!(total, recount);
        let own = groups.get("img0003").map_or(0, Vec::len);
        assert!(groups.values().all(|v| v.len() <= own));
        let empty = ImageFeatures::new("q", vec![]);
        assert!(index.search_image(&empty, &params).unwrap().is_empty());
    }

    #[test]
    fn persistence_roundtrip_and_errors() {
        let mut rng = Rng::new(8);
        let c = corpus(&mut rng, 12, 30, 8);
        let index = build_index(&c, &small_config(), 9).unwrap();
        let mut buf = Vec::new();
        write_index(&index, &mut buf).unwrap();
        let loaded = read_index(&buf[..]).unwrap();
        assert_eq!(loaded, index);

        let again = build_index(&c, &small_config(), 9).unwrap();
        let mut buf2 = Vec::new();
        write_index(&again, &mut buf2).unwrap();
        assert_eq!(buf, buf2);

        for cut in [3, 10, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(read_index(&buf[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[1] = b'Z';
        match read_index(&bad[..]) {
            Err(Error::BadMagic { field, .. }) => assert_eq!(field, "index magic"),
            other => panic!("expected bad magic, got {other:?}"),
        }
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_index(&bad[..]), Err(Error::UnsupportedVersion { .. })));
    }
}
