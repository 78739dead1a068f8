//! C ABI over `landmark-retrieval`.
//!
//! Every function returns an [`LmretStatus`]; on failure a one-line message
//! is kept per thread and read with [`lmret_last_error`]. Handles are opaque
//! and released with their `_free` function. Panics never cross the
//! boundary; they surface as `LMRET_STATUS_INTERNAL`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use landmark_retrieval::attention::{self, AttentionScorer};
use landmark_retrieval::evaluation;
use landmark_retrieval::feature::{Descriptor, ImageFeatures, LocalFeature};
use landmark_retrieval::index::{self, RetrievalIndex, SearchParams};
use landmark_retrieval::linalg;
use landmark_retrieval::matcher::{self, Correspondence, RansacParams};
use landmark_retrieval::pipeline::{self, PipelineParams};
use landmark_retrieval::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmretStatus {
    Ok = 0,
    /// Null pointer, bad length or out-of-range parameter.
    InvalidArgument = 1,
    Io = 2,
    /// File content is malformed or of an unsupported version.
    Format = 3,
    /// Output buffer too small; the required size is reported.
    BufferTooSmall = 4,
    State = 5,
    Internal = 6,
}

/// Opaque retrieval index.
pub struct LmretIndex {
    inner: RetrievalIndex,
}

/// Opaque attention scorer.
pub struct LmretAttention {
    inner: AttentionScorer,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmretSearchParams {
    pub soft_assign: usize,
    pub leaf_budget: usize,
    pub top_k: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmretRansacParams {
    pub iters: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LmretIndexInfo {
    pub images: usize,
    pub descriptors: usize,
    /// Dimension expected by search: the raw dimension when the index
    /// carries a reduction, else the indexed dimension.
    pub input_dim: usize,
    pub indexed_dim: usize,
    pub code_bytes: usize,
    pub leaves: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LmretHit {
    pub image: u32,
    /// Position among the image's indexed features, which are the
    /// selected features in descending score order.
    pub feature_ordinal: u32,
    pub distance: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LmretMatch {
    pub image: u32,
    pub inliers: usize,
    pub correspondences: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LmretVerification {
    pub inliers: usize,
    /// 1 when the match was accepted (at least `min_inliers` inliers).
    pub has_model: u8,
    /// a11, a12, a21, a22, tx, ty mapping query points to database points.
    pub model: [f64; 6],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

struct Fail(LmretStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) => LmretStatus::InvalidArgument,
            Error::Io(_) => LmretStatus::Io,
            Error::BadMagic { .. } | Error::UnsupportedVersion { .. } | Error::Format { .. } => {
                LmretStatus::Format
            }
            Error::State(_) => LmretStatus::State,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(LmretStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LmretStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LmretStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LmretStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lmret_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lmret_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn lmret_search_params_default() -> LmretSearchParams {
    let p = SearchParams::default();
    LmretSearchParams {
        soft_assign: p.soft_assign,
        leaf_budget: p.leaf_budget,
        top_k: p.top_k,
    }
}

#[no_mangle]
pub extern "C" fn lmret_ransac_params_default() -> LmretRansacParams {
    let p = RansacParams::default();
    LmretRansacParams {
        iters: p.iters,
        inlier_tol: p.inlier_tol,
        min_inliers: p.min_inliers,
        seed: p.seed,
    }
}

fn search_params(p: Option<&LmretSearchParams>) -> SearchParams {
    p.map_or_else(SearchParams::default, |p| SearchParams {
        soft_assign: p.soft_assign,
        leaf_budget: p.leaf_budget,
        top_k: p.top_k,
    })
}

fn ransac_params(p: Option<&LmretRansacParams>) -> RansacParams {
    p.map_or_else(RansacParams::default, |p| RansacParams {
        iters: p.iters,
        inlier_tol: p.inlier_tol,
        min_inliers: p.min_inliers,
        seed: p.seed,
    })
}

// ---------------------------------------------------------------------------
// index

/// Loads an index file. On success `*out` owns a handle for
/// `lmret_index_free`; on failure it is set to null.
#[no_mangle]
pub unsafe extern "C" fn lmret_index_load(path: *const c_char, out: *mut *mut LmretIndex) -> LmretStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let idx = index::load_index(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(LmretIndex { inner: idx }));
        Ok(())
    })
}

/// Releases an index; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lmret_index_free(index: *mut LmretIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

#[no_mangle]
pub unsafe extern "C" fn lmret_index_info(index: *const LmretIndex, out: *mut LmretIndexInfo) -> LmretStatus {
    guard(|| {
        let idx = &ref_arg(index, "index")?.inner;
        let out = out_arg(out, "out")?;
        *out = LmretIndexInfo {
            images: idx.images.len(),
            descriptors: idx.num_postings(),
            input_dim: idx.pca.as_ref().map_or(idx.config.descriptor_dim, |p| p.input_dim()),
            indexed_dim: idx.config.descriptor_dim,
            code_bytes: idx.code_bytes(),
            leaves: idx.num_leaves(),
        };
        Ok(())
    })
}

/// Copies the id of image `image` into `buf` (NUL-terminated). `*needed`,
/// when not null, receives the buffer size required including the NUL.
#[no_mangle]
pub unsafe extern "C" fn lmret_index_image_id(
    index: *const LmretIndex,
    image: u32,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> LmretStatus {
    guard(|| {
        let idx = &ref_arg(index, "index")?.inner;
        let entry = idx
            .images
            .get(image as usize)
            .ok_or_else(|| invalid(format!("image {image} out of range ({} images)", idx.images.len())))?;
        let bytes = entry.image_id.as_bytes();
        if let Some(n) = needed.as_mut() {
            *n = bytes.len() + 1;
        }
        if buf_len < bytes.len() + 1 {
            return Err(Fail(
                LmretStatus::BufferTooSmall,
                format!("image id needs {} bytes, buffer has {buf_len}", bytes.len() + 1),
            ));
        }
        if buf.is_null() {
            return Err(invalid("buf is null"));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}

/// Nearest indexed descriptors of one raw descriptor of length `dim`.
/// `params` may be null for defaults. Writes at most `capacity` hits,
/// nearest first, and their count to `*n_hits`.
#[no_mangle]
pub unsafe extern "C" fn lmret_index_search(
    index: *const LmretIndex,
    descriptor: *const f64,
    dim: usize,
    params: *const LmretSearchParams,
    hits: *mut LmretHit,
    capacity: usize,
    n_hits: *mut usize,
) -> LmretStatus {
    guard(|| {
        let idx = &ref_arg(index, "index")?.inner;
        let n_hits = out_arg(n_hits, "n_hits")?;
        *n_hits = 0;
        let q = slice_arg(descriptor, dim, "descriptor")?;
        let params = search_params(params.as_ref());
        params.validate()?;
        let reduced = match &idx.pca {
            Some(pca) => linalg::reduce_descriptor(pca, &Descriptor(q.to_vec()))?.0,
            None => q.to_vec(),
        };
        let found = idx.search_descriptor(&reduced, &params)?;
        let n = found.len().min(capacity);
        if n > 0 && hits.is_null() {
            return Err(invalid("hits is null"));
        }
        for (i, h) in found.iter().take(n).enumerate() {
            *hits.add(i) = LmretHit {
                image: h.posting.image,
                feature_ordinal: h.posting.feature_ordinal,
                distance: h.distance,
            };
        }
        *n_hits = n;
        Ok(())
    })
}

/// Retrieves and verifies one query image given as `n` features:
/// `locations` (n x 2: x, y), `scales` (n), `scores` (n) and
/// `descriptors` (n x dim, row-major). `attention` may be null to keep the
/// given scores. Matches are ranked best first; at most `capacity` are
/// written and their count stored in `*n_matches`.
#[no_mangle]
pub unsafe extern "C" fn lmret_index_query(
    index: *const LmretIndex,
    attention: *const LmretAttention,
    locations: *const f64,
    scales: *const f64,
    scores: *const f64,
    descriptors: *const f64,
    n: usize,
    dim: usize,
    feature_cap: usize,
    search: *const LmretSearchParams,
    ransac: *const LmretRansacParams,
    matches: *mut LmretMatch,
    capacity: usize,
    n_matches: *mut usize,
) -> LmretStatus {
    guard(|| {
        let idx = &ref_arg(index, "index")?.inner;
        let n_matches = out_arg(n_matches, "n_matches")?;
        *n_matches = 0;
        let total = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let loc = slice_arg(locations, n * 2, "locations")?;
        let sc = slice_arg(scales, n, "scales")?;
        let st = slice_arg(scores, n, "scores")?;
        let desc = slice_arg(descriptors, total, "descriptors")?;
        let features = (0..n)
            .map(|i| LocalFeature {
                x: loc[2 * i],
                y: loc[2 * i + 1],
                scale: sc[i],
                score: st[i],
                descriptor: Descriptor(desc[i * dim..(i + 1) * dim].to_vec()),
            })
            .collect();
        let query = ImageFeatures::new("query", features);
        let params = PipelineParams {
            index: idx.config.clone(),
            feature_cap,
            search: search_params(search.as_ref()),
            ransac: ransac_params(ransac.as_ref()),
            seed: 0,
        };
        params.search.validate()?;
        params.ransac.validate()?;
        let scorer = attention.as_ref().map(|a| &a.inner);
        let results = pipeline::query_image(idx, &query, scorer, &params)?;
        let k = results.len().min(capacity);
        if k > 0 && matches.is_null() {
            return Err(invalid("matches is null"));
        }
        for (i, r) in results.iter().take(k).enumerate() {
            let image = idx
                .images
                .binary_search_by(|e| e.image_id.as_str().cmp(&r.image_id))
                .map_err(|_| Fail(LmretStatus::State, format!("unknown image {}", r.image_id)))?;
            *matches.add(i) = LmretMatch {
                image: image as u32,
                inliers: r.inlier_count,
                correspondences: r.total_correspondences,
            };
        }
        *n_matches = k;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// attention

/// Loads the scorer half of an attention checkpoint.
#[no_mangle]
pub unsafe extern "C" fn lmret_attention_load(path: *const c_char, out: *mut *mut LmretAttention) -> LmretStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = attention::load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(LmretAttention { inner: model.scorer }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lmret_attention_free(attention: *mut LmretAttention) {
    if !attention.is_null() {
        drop(Box::from_raw(attention));
    }
}

#[no_mangle]
pub unsafe extern "C" fn lmret_attention_input_dim(attention: *const LmretAttention, out: *mut usize) -> LmretStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(attention, "attention")?.inner.input_dim();
        Ok(())
    })
}

/// Scores `n` descriptors (n x dim, row-major) into `out` (n).
#[no_mangle]
pub unsafe extern "C" fn lmret_attention_score(
    attention: *const LmretAttention,
    descriptors: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> LmretStatus {
    guard(|| {
        let scorer = &ref_arg(attention, "attention")?.inner;
        if dim != scorer.input_dim() {
            return Err(invalid(format!("dim {dim} != scorer input dimension {}", scorer.input_dim())));
        }
        let total = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let desc = slice_arg(descriptors, total, "descriptors")?;
        if n > 0 && out.is_null() {
            return Err(invalid("out is null"));
        }
        for i in 0..n {
            *out.add(i) = scorer.score(&desc[i * dim..(i + 1) * dim])?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// verification and geometry

/// Affine RANSAC over `n` correspondences; `query_points` and `db_points`
/// are n x 2 row-major. `params` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn lmret_ransac_verify(
    query_points: *const f64,
    db_points: *const f64,
    n: usize,
    params: *const LmretRansacParams,
    out: *mut LmretVerification,
) -> LmretStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = LmretVerification::default();
        let q = slice_arg(query_points, n * 2, "query_points")?;
        let d = slice_arg(db_points, n * 2, "db_points")?;
        let corrs: Vec<Correspondence> = (0..n)
            .map(|i| Correspondence::new([q[2 * i], q[2 * i + 1]], [d[2 * i], d[2 * i + 1]]))
            .collect();
        let r = matcher::ransac_verify("", &corrs, &ransac_params(params.as_ref()))?;
        out.inliers = r.inlier_count;
        if let Some(m) = r.model {
            out.has_model = 1;
            out.model = m.params();
        }
        Ok(())
    })
}

/// Great-circle distance in km between two (lat, lon) points in degrees.
#[no_mangle]
pub unsafe extern "C" fn lmret_haversine_km(
    lat1: f64,
    lon1: f64,
    lat2: f64,
    lon2: f64,
    out: *mut f64,
) -> LmretStatus {
    guard(|| {
        *out_arg(out, "out")? = evaluation::haversine_km((lat1, lon1), (lat2, lon2))?;
        Ok(())
    })
}
