//! Product quantization with bit-packed codes and asymmetric distances.
//!
//! A vector of dimension `d` is cut into `m` equal slices; each slice is
//! replaced by the index of its nearest centroid in a per-slice codebook of
//! `2^bits` entries. Indices are packed little-endian, index `j` occupying
//! bits `[j*bits, (j+1)*bits)` of the code. With `m = 10, bits = 5` a
//! 40-dimensional descriptor becomes a 50-bit code stored in 7 bytes.
//!
//! Queries are never quantized: [`AdcTable`] holds the squared distance of
//! each query slice to every centroid, so the distance to a code is `m`
//! table lookups.

use crate::error::{Error, Result};
use crate::linalg::{self, kmeans_train_traced, squared_distance};
use crate::rng::Rng;

pub const DEFAULT_PQ_M: usize = 10;
pub const DEFAULT_PQ_BITS: u32 = 5;
pub const MAX_PQ_BITS: u32 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ProductQuantizer {
    pub m: usize,
    pub bits: u32,
    pub sub_dim: usize,
    /// `codebooks[j][c]` is centroid `c` of slice `j`.
    pub codebooks: Vec<Vec<Vec<f64>>>,
}

/// Packed sub-indices of one vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PqCode(pub Vec<u8>);

impl PqCode {
    pub fn bytes(&self) -> &[u8] {
        &self.0
    }
}

pub fn code_bytes(m: usize, bits: u32) -> usize {
    (m * bits as usize).div_ceil(8)
}

/// Packs `indices` at `bits` each; unused trailing bits are zero.
pub fn pack_indices(indices: &[u32], bits: u32) -> PqCode {
    let mut out = vec![0u8; code_bytes(indices.len(), bits)];
    for (j, &idx) in indices.iter().enumerate() {
        debug_assert!(bits == 32 || idx < (1 << bits));
        let mut off = j * bits as usize;
        let mut remaining = bits;
        let mut value = idx;
        while remaining > 0 {
            let byte = off / 8;
            let shift = off % 8;
            let take = remaining.min(8 - shift as u32);
            let mask = (1u32 << take) - 1;
            out[byte] |= ((value & mask) << shift) as u8;
            value >>= take;
            remaining -= take;
            off += take as usize;
        }
    }
    PqCode(out)
}

/// Index `j` of a packed code.
#[inline]
pub fn code_index(code: &[u8], j: usize, bits: u32) -> usize {
    let off = j * bits as usize;
    let byte = off / 8;
    let shift = off % 8;
    let mut window = 0u32;
    let span = (shift + bits as usize).div_ceil(8);
    for k in 0..span {
        window |= (code[byte + k] as u32) << (8 * k);
    }
    ((window >> shift) & ((1u32 << bits) - 1)) as usize
}

pub fn unpack_indices(code: &[u8], m: usize, bits: u32) -> Vec<u32> {
    (0..m).map(|j| code_index(code, j, bits) as u32).collect()
}

impl ProductQuantizer {
    pub fn dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn ksub(&self) -> usize {
        1 << self.bits
    }

    pub fn code_bytes(&self) -> usize {
        code_bytes(self.m, self.bits)
    }

    pub fn code_bits(&self) -> usize {
        self.m * self.bits as usize
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector dimension {} != quantizer dimension {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn nearest_indices(&self, v: &[f64]) -> Vec<u32> {
        v.chunks_exact(self.sub_dim)
            .zip(&self.codebooks)
            .map(|(slice, book)| {
                let mut best = (0u32, f64::INFINITY);
                for (c, centroid) in book.iter().enumerate() {
                    let d = squared_distance(slice, centroid);
                    if d < best.1 {
                        best = (c as u32, d);
                    }
                }
                best.0
            })
            .collect()
    }

    pub fn encode(&self, v: &[f64]) -> Result<PqCode> {
        self.check_dim(v)?;
        Ok(pack_indices(&self.nearest_indices(v), self.bits))
    }

    pub fn decode(&self, code: &PqCode) -> Vec<f64> {
        self.decode_bytes(code.bytes())
    }

    pub fn decode_bytes(&self, code: &[u8]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (j, book) in self.codebooks.iter().enumerate() {
            out.extend_from_slice(&book[code_index(code, j, self.bits)]);
        }
        out
    }

    pub fn adc_table(&self, query: &[f64]) -> Result<AdcTable> {
        self.check_dim(query)?;
        let ksub = self.ksub();
        let mut table = Vec::with_capacity(self.m * ksub);
        for (slice, book) in query.chunks_exact(self.sub_dim).zip(&self.codebooks) {
            table.extend(book.iter().map(|c| squared_distance(slice, c)));
        }
        Ok(AdcTable {
            m: self.m,
            bits: self.bits,
            table,
        })
    }

    /// Rounds every codebook entry to the nearest `f32`, making the model
    /// exactly representable in the on-disk format.
    pub fn round_to_f32(&mut self) {
        for v in self.codebooks.iter_mut().flatten().flatten() {
            *v = *v as f32 as f64;
        }
    }
}

/// Per-query lookup table: `m` rows of `2^bits` squared slice distances.
#[derive(Clone, Debug, PartialEq)]
pub struct AdcTable {
    pub m: usize,
    pub bits: u32,
    pub table: Vec<f64>,
}

impl AdcTable {
    pub fn zeros(m: usize, bits: u32) -> Self {
        AdcTable {
            m,
            bits,
            table: vec![0.0; m << bits],
        }
    }

    #[inline]
    pub fn distance(&self, code: &[u8]) -> f64 {
        let ksub = 1usize << self.bits;
        let mut acc = 0.0;
        for j in 0..self.m {
            acc += self.table[j * ksub + code_index(code, j, self.bits)];
        }
        acc
    }

    /// Distances to a contiguous run of codes, `stride` bytes each.
    pub fn distances(&self, codes: &[u8], stride: usize) -> Vec<f64> {
        codes.chunks_exact(stride).map(|c| self.distance(c)).collect()
    }
}

pub fn adc_table(pq: &ProductQuantizer, query: &[f64]) -> Result<AdcTable> {
    pq.adc_table(query)
}

pub fn adc_distance(table: &AdcTable, code: &PqCode) -> f64 {
    table.distance(code.bytes())
}

pub fn pq_train(vectors: &[Vec<f64>], m: usize, bits: u32, iters: usize, seed: u64) -> Result<ProductQuantizer> {
    pq_train_traced(vectors, m, bits, iters, seed).map(|(pq, _)| pq)
}

/// Trains a product quantizer and reports the mean squared reconstruction
/// error over the training set after seeding and after each Lloyd round.
pub fn pq_train_traced(
    vectors: &[Vec<f64>],
    m: usize,
    bits: u32,
    iters: usize,
    seed: u64,
) -> Result<(ProductQuantizer, Vec<f64>)> {
    if m == 0 || bits == 0 || bits > MAX_PQ_BITS {
        return Err(Error::invalid(format!(
            "need m >= 1 and 1 <= bits <= {MAX_PQ_BITS}, got m={m}, bits={bits}"
        )));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if dim == 0 || dim % m != 0 {
        return Err(Error::invalid(format!(
            "dimension {dim} is not a positive multiple of m={m}"
        )));
    }
    let ksub = 1usize << bits;
    if vectors.len() < ksub {
        return Err(Error::invalid(format!(
            "PQ with {bits} bits needs at least {ksub} training vectors, got {}",
            vectors.len()
        )));
    }
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::invalid("training vectors have inconsistent dimensions"));
    }
    let sub_dim = dim / m;
    let mut codebooks = Vec::with_capacity(m);
    let mut trace: Vec<f64> = Vec::new();
    for j in 0..m {
        let slices: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| v[j * sub_dim..(j + 1) * sub_dim].to_vec())
            .collect();
        let sub_seed = Rng::derive(seed, j as u64).next_u64();
        let (model, sub_trace) = kmeans_train_traced(&slices, ksub, iters, sub_seed)?;
        // converged slices keep their final inertia for the remaining rounds
        let len = trace.len().max(sub_trace.len());
        trace.resize(len, *trace.last().unwrap_or(&0.0));
        let last = *sub_trace.last().expect("non-empty trace");
        for (t, slot) in trace.iter_mut().enumerate() {
            *slot += sub_trace.get(t).copied().unwrap_or(last);
        }
        codebooks.push(model.centroids);
    }
    let n = vectors.len() as f64;
    trace.iter_mut().for_each(|t| *t /= n);
    Ok((
        ProductQuantizer {
            m,
            bits,
            sub_dim,
            codebooks,
        },
        trace,
    ))
}

pub fn pq_encode(pq: &ProductQuantizer, v: &[f64]) -> Result<PqCode> {
    pq.encode(v)
}

pub fn pq_decode(pq: &ProductQuantizer, code: &PqCode) -> Vec<f64> {
    pq.decode(code)
}

/// Rotation plus product quantizer fit to the residuals of one region of
/// the coarse partition.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalPq {
    /// Orthonormal `d × d` matrix, rows are the principal axes of the
    /// training residuals.
    pub rotation: Vec<Vec<f64>>,
    pub pq: ProductQuantizer,
}

impl LocalPq {
    /// Plain residual PQ (identity rotation).
    pub fn unrotated(pq: ProductQuantizer) -> Self {
        LocalPq {
            rotation: linalg::identity(pq.dim()),
            pq,
        }
    }

    pub fn dim(&self) -> usize {
        self.pq.dim()
    }

    pub fn rotate(&self, residual: &[f64]) -> Vec<f64> {
        linalg::mat_vec(&self.rotation, residual)
    }

    pub fn encode_residual(&self, residual: &[f64]) -> Result<PqCode> {
        self.pq.check_dim(residual)?;
        self.pq.encode(&self.rotate(residual))
    }

    pub fn encode(&self, v: &[f64], coarse_centroid: &[f64]) -> Result<PqCode> {
        self.encode_residual(&residual(v, coarse_centroid))
    }

    /// Reconstruction in the original space.
    pub fn decode(&self, code: &PqCode, coarse_centroid: &[f64]) -> Vec<f64> {
        let mut out = linalg::mat_t_vec(&self.rotation, &self.pq.decode(code));
        for (o, c) in out.iter_mut().zip(coarse_centroid) {
            *o += c;
        }
        out
    }

    pub fn adc_table_for_residual(&self, residual: &[f64]) -> Result<AdcTable> {
        self.pq.check_dim(residual)?;
        self.pq.adc_table(&self.rotate(residual))
    }

    pub fn round_to_f32(&mut self) {
        for v in self.rotation.iter_mut().flatten() {
            *v = *v as f32 as f64;
        }
        self.pq.round_to_f32();
    }
}

pub fn residual(v: &[f64], center: &[f64]) -> Vec<f64> {
    v.iter().zip(center).map(|(a, b)| a - b).collect()
}

/// Fits a [`LocalPq`] to one cell. Fails with `InvalidInput` when the cell
/// holds fewer than `2^bits` vectors; callers fall back to a shared
/// quantizer in that case.
pub fn lopq_train(
    cell_vectors: &[Vec<f64>],
    coarse_centroid: &[f64],
    m: usize,
    bits: u32,
    iters: usize,
    seed: u64,
) -> Result<LocalPq> {
    let ksub = 1usize << bits.min(MAX_PQ_BITS);
    if cell_vectors.len() < ksub {
        return Err(Error::invalid(format!(
            "cell has {} vectors, local quantizer needs {ksub}",
            cell_vectors.len()
        )));
    }
    if cell_vectors.iter().any(|v| v.len() != coarse_centroid.len()) {
        return Err(Error::invalid("cell vectors do not match centroid dimension"));
    }
    let residuals: Vec<Vec<f64>> = cell_vectors
        .iter()
        .map(|v| residual(v, coarse_centroid))
        .collect();
    let (_, _, rotation) = linalg::principal_axes(&residuals)?;
    let rotated: Vec<Vec<f64>> = residuals
        .iter()
        .map(|r| linalg::mat_vec(&rotation, r))
        .collect();
    let pq = pq_train(&rotated, m, bits, iters, seed)?;
    Ok(LocalPq { rotation, pq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn random_vectors(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn reference_code_size() {
        let mut rng = Rng::new(1);
        let data = random_vectors(&mut rng, 200, 40);
        let pq = pq_train(&data, 10, 5, 5, 0).unwrap();
        assert_eq!(pq.code_bits(), 50);
        assert_eq!(pq.code_bytes(), 7);
        assert_eq!(pq.encode(&data[0]).unwrap().0.len(), 7);
    }

    #[test]
    fn train_preconditions() {
        let mut rng = Rng::new(2);
        let data = random_vectors(&mut rng, 40, 6);
        assert!(pq_train(&data, 4, 2, 5, 0).is_err()); // 6 % 4 != 0
        assert!(pq_train(&data[..3], 3, 2, 5, 0).is_err()); // 3 < 4
        assert!(pq_train(&data, 3, 0, 5, 0).is_err());
        assert!(pq_train(&data, 3, 2, 5, 0).is_ok());
    }

    #[test]
    fn few_distinct_subvectors_are_exact() {
        let mut rng = Rng::new(3);
        let protos = random_vectors(&mut rng, 3, 8);
        let data: Vec<Vec<f64>> = (0..40).map(|i| protos[i % 3].clone()).collect();
        let pq = pq_train(&data, 2, 2, 10, 0).unwrap();
        for v in &data {
            let back = pq.decode(&pq.encode(v).unwrap());
            // centroid = mean of identical slices, exact up to rounding
            assert!(squared_distance(&back, v) < 1e-24);
        }
    }

    #[test]
    fn training_error_non_increasing() {
        let mut rng = Rng::new(4);
        let data = random_vectors(&mut rng, 5000, 40);
        let (_, trace) = pq_train_traced(&data, 10, 5, 15, 7).unwrap();
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
        }
    }

    #[test]
    fn representable_point_roundtrip() {
        let mut rng = Rng::new(5);
        let data = random_vectors(&mut rng, 300, 12);
        let pq = pq_train(&data, 4, 3, 5, 1).unwrap();
        let idx = [1u32, 7, 0, 5];
        let point: Vec<f64> = idx
            .iter()
            .enumerate()
            .flat_map(|(j, &c)| pq.codebooks[j][c as usize].clone())
            .collect();
        let code = pq.encode(&point).unwrap();
        assert_eq!(unpack_indices(code.bytes(), 4, 3), idx.to_vec());
        assert_eq!(squared_distance(&pq.decode(&code), &point), 0.0);
        let table = pq.adc_table(&point).unwrap();
        assert_eq!(adc_distance(&table, &code), 0.0);
    }

    #[test]
    fn encode_is_optimal_by_enumeration() {
        let mut rng = Rng::new(6);
        let data = random_vectors(&mut rng, 50, 4);
        let pq = pq_train(&data, 2, 2, 5, 2).unwrap();
        for _ in 0..200 {
            let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let got = squared_distance(&pq.decode(&pq.encode(&v).unwrap()), &v);
            let mut best = f64::INFINITY;
            for a in 0..4u32 {
                for b in 0..4u32 {
                    let code = pack_indices(&[a, b], 2);
                    best = best.min(squared_distance(&pq.decode(&code), &v));
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn decode_matches_lookup_and_is_idempotent() {
        let mut rng = Rng::new(7);
        let data = random_vectors(&mut rng, 200, 40);
        let pq = pq_train(&data, 10, 5, 5, 3).unwrap();
        let zero = pq.decode(&pack_indices(&[0; 10], 5));
        let expect: Vec<f64> = pq.codebooks.iter().flat_map(|b| b[0].clone()).collect();
        assert_eq!(zero, expect);
        for v in data.iter().take(50) {
            let code = pq.encode(v).unwrap();
            let dec = pq.decode(&code);
            let idx = unpack_indices(code.bytes(), 10, 5);
            let naive: Vec<f64> = (0..10)
                .flat_map(|j| pq.codebooks[j][idx[j] as usize].clone())
                .collect();
            assert_eq!(dec, naive);
            assert_eq!(pq.encode(&dec).unwrap(), code);
        }
    }

    #[test]
    fn adc_identity_and_ranking() {
        let mut rng = Rng::new(8);
        let data = random_vectors(&mut rng, 500, 40);
        let pq = pq_train(&data, 10, 5, 8, 4).unwrap();
        let q: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let table = pq.adc_table(&q).unwrap();
        assert!(table.table.iter().all(|t| *t >= 0.0 && t.is_finite()));
        let codes: Vec<PqCode> = (0..1000)
            .map(|_| pack_indices(&(0..10).map(|_| rng.below(32) as u32).collect::<Vec<_>>(), 5))
            .collect();
        let exact: Vec<f64> = codes.iter().map(|c| squared_distance(&q, &pq.decode(c))).collect();
        let adc: Vec<f64> = codes.iter().map(|c| adc_distance(&table, c)).collect();
        for (a, e) in adc.iter().zip(&exact) {
            assert!((a - e).abs() <= 1e-9 * (1.0 + e));
        }
        let mut by_adc: Vec<usize> = (0..1000).collect();
        by_adc.sort_by(|&a, &b| adc[a].total_cmp(&adc[b]).then(a.cmp(&b)));
        let mut by_exact: Vec<usize> = (0..1000).collect();
        by_exact.sort_by(|&a, &b| exact[a].total_cmp(&exact[b]).then(a.cmp(&b)));
        let mismatch = by_adc.iter().zip(&by_exact).filter(|(a, b)| a != b).count();
        // identical up to ulp-level ties
        assert!(mismatch <= 2, "{mismatch} rank mismatches");
        let flat: Vec<u8> = codes.iter().flat_map(|c| c.0.clone()).collect();
        assert_eq!(table.distances(&flat, 7), adc);
        assert_eq!(AdcTable::zeros(10, 5).distance(codes[0].bytes()), 0.0);
    }

    #[test]
    fn lopq_beats_plain_pq_on_correlated_cell() {
        let mut rng = Rng::new(9);
        let centroid: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        // residual energy concentrated along one oblique direction
        let dir = crate::linalg::l2_normalize(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let cell: Vec<Vec<f64>> = (0..600)
            .map(|_| {
                let t = 5.0 * rng.normal();
                (0..8)
                    .map(|i| centroid[i] + t * dir[i] + 0.1 * rng.normal())
                    .collect()
            })
            .collect();
        let local = lopq_train(&cell, &centroid, 4, 3, 20, 1).unwrap();
        let residuals: Vec<Vec<f64>> = cell.iter().map(|v| residual(v, &centroid)).collect();
        let plain = pq_train(&residuals, 4, 3, 20, 1).unwrap();
        let mut e_local = 0.0;
        let mut e_plain = 0.0;
        for (v, r) in cell.iter().zip(&residuals) {
            e_local += squared_distance(&local.decode(&local.encode(v, &centroid).unwrap(), &centroid), v);
            e_plain += squared_distance(&plain.decode(&plain.encode(r).unwrap()), r);
        }
        assert!(e_local <= e_plain, "local {e_local} plain {e_plain}");
        for i in 0..8 {
            for j in 0..8 {
                let d = crate::linalg::dot(&local.rotation[i], &local.rotation[j]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lopq_isometry_and_degenerate_cell() {
        let mut rng = Rng::new(10);
        let centroid: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let cell: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..8).map(|i| centroid[i] + rng.normal()).collect())
            .collect();
        let local = lopq_train(&cell, &centroid, 2, 3, 10, 2).unwrap();
        for v in &cell {
            let code = local.encode(v, &centroid).unwrap();
            let rotated = local.rotate(&residual(v, &centroid));
            let err_rot = squared_distance(&rotated, &local.pq.decode(&code));
            let err_orig = squared_distance(v, &local.decode(&code, &centroid));
            assert!((err_rot - err_orig).abs() < 1e-9);
        }

        let same: Vec<Vec<f64>> = vec![centroid.clone(); 20];
        let local = lopq_train(&same, &centroid, 2, 3, 10, 2).unwrap();
        let code = local.encode(&centroid, &centroid).unwrap();
        assert_eq!(squared_distance(&local.decode(&code, &centroid), &centroid), 0.0);

        assert!(lopq_train(&cell[..7], &centroid, 2, 3, 10, 2).is_err());
    }

    #[test]
    fn deterministic_training() {
        let mut rng = Rng::new(11);
        let data = random_vectors(&mut rng, 400, 20);
        let a = pq_train(&data, 5, 4, 10, 77).unwrap();
        let b = pq_train(&data, 5, 4, 10, 77).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(bits in 1u32..=16, raw in proptest::collection::vec(any::<u32>(), 1..20)) {
            let idx: Vec<u32> = raw.iter().map(|v| v & ((1u32 << bits) - 1)).collect();
            let code = pack_indices(&idx, bits);
            prop_assert_eq!(code.0.len(), code_bytes(idx.len(), bits));
            prop_assert_eq!(unpack_indices(&code.0, idx.len(), bits), idx.clone());
            let used = idx.len() * bits as usize;
            if used % 8 != 0 {
                let last = *code.0.last().unwrap();
                prop_assert_eq!(last >> (used % 8), 0);
            }
        }
    }
}
