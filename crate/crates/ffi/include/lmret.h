#ifndef LMRET_H
#define LMRET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LmretStatus {
  LMRET_STATUS_OK = 0,
  /**
   * Null pointer, bad length or out-of-range parameter.
   */
  LMRET_STATUS_INVALID_ARGUMENT = 1,
  LMRET_STATUS_IO = 2,
  /**
   * File content is malformed or of an unsupported version.
   */
  LMRET_STATUS_FORMAT = 3,
  /**
   * Output buffer too small; the required size is reported.
   */
  LMRET_STATUS_BUFFER_TOO_SMALL = 4,
  LMRET_STATUS_STATE = 5,
  LMRET_STATUS_INTERNAL = 6,
} LmretStatus;

/**
 * Opaque attention scorer.
 */
typedef struct LmretAttention LmretAttention;

/**
 * Opaque retrieval index.
 */
typedef struct LmretIndex LmretIndex;

typedef struct LmretSearchParams {
  size_t soft_assign;
  size_t leaf_budget;
  size_t top_k;
} LmretSearchParams;

typedef struct LmretRansacParams {
  size_t iters;
  double inlier_tol;
  size_t min_inliers;
  uint64_t seed;
} LmretRansacParams;

typedef struct LmretIndexInfo {
  size_t images;
  size_t descriptors;
  /**
   * Dimension expected by search: the raw dimension when the index
   * carries a reduction, else the indexed dimension.
   */
  size_t input_dim;
  size_t indexed_dim;
  size_t code_bytes;
  size_t leaves;
} LmretIndexInfo;

typedef struct LmretHit {
  uint32_t image;
  /**
   * Position among the image's indexed features, which are the
   * selected features in descending score order.
   */
  uint32_t feature_ordinal;
  double distance;
} LmretHit;

typedef struct LmretMatch {
  uint32_t image;
  size_t inliers;
  size_t correspondences;
} LmretMatch;

typedef struct LmretVerification {
  size_t inliers;
  /**
   * 1 when the match was accepted (at least `min_inliers` inliers).
   */
  uint8_t has_model;
  /**
   * a11, a12, a21, a22, tx, ty mapping query points to database points.
   */
  double model[6];
} LmretVerification;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next call on the same thread.
 */
const char *lmret_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *lmret_version(void);

struct LmretSearchParams lmret_search_params_default(void);

struct LmretRansacParams lmret_ransac_params_default(void);

/**
 * Loads an index file. On success `*out` owns a handle for
 * `lmret_index_free`; on failure it is set to null.
 */
enum LmretStatus lmret_index_load(const char *path, struct LmretIndex **out);

/**
 * Releases an index; null is ignored.
 */
void lmret_index_free(struct LmretIndex *index);

enum LmretStatus lmret_index_info(const struct LmretIndex *index, struct LmretIndexInfo *out);

/**
 * Copies the id of image `image` into `buf` (NUL-terminated). `*needed`,
 * when not null, receives the buffer size required including the NUL.
 */
enum LmretStatus lmret_index_image_id(const struct LmretIndex *index,
                                      uint32_t image,
                                      char *buf,
                                      size_t buf_len,
                                      size_t *needed);

/**
 * Nearest indexed descriptors of one raw descriptor of length `dim`.
 * `params` may be null for defaults. Writes at most `capacity` hits,
 * nearest first, and their count to `*n_hits`.
 */
enum LmretStatus lmret_index_search(const struct LmretIndex *index,
                                    const double *descriptor,
                                    size_t dim,
                                    const struct LmretSearchParams *params,
                                    struct LmretHit *hits,
                                    size_t capacity,
                                    size_t *n_hits);

/**
 * Retrieves and verifies one query image given as `n` features:
 * `locations` (n x 2: x, y), `scales` (n), `scores` (n) and
 * `descriptors` (n x dim, row-major). `attention` may be null to keep the
 * given scores. Matches are ranked best first; at most `capacity` are
 * written and their count stored in `*n_matches`.
 */
enum LmretStatus lmret_index_query(const struct LmretIndex *index,
                                   const struct LmretAttention *attention,
                                   const double *locations,
                                   const double *scales,
                                   const double *scores,
                                   const double *descriptors,
                                   size_t n,
                                   size_t dim,
                                   size_t feature_cap,
                                   const struct LmretSearchParams *search,
                                   const struct LmretRansacParams *ransac,
                                   struct LmretMatch *matches,
                                   size_t capacity,
                                   size_t *n_matches);

/**
 * Loads the scorer half of an attention checkpoint.
 */
enum LmretStatus lmret_attention_load(const char *path, struct LmretAttention **out);

void lmret_attention_free(struct LmretAttention *attention);

enum LmretStatus lmret_attention_input_dim(const struct LmretAttention *attention, size_t *out);

/**
 * Scores `n` descriptors (n x dim, row-major) into `out` (n).
 */
enum LmretStatus lmret_attention_score(const struct LmretAttention *attention,
                                       const double *descriptors,
                                       size_t n,
                                       size_t dim,
                                       double *out);

/**
 * Affine RANSAC over `n` correspondences; `query_points` and `db_points`
 * are n x 2 row-major. `params` may be null for defaults.
 */
enum LmretStatus lmret_ransac_verify(const double *query_points,
                                     const double *db_points,
                                     size_t n,
                                     const struct LmretRansacParams *params,
                                     struct LmretVerification *out);

/**
 * Great-circle distance in km between two (lat, lon) points in degrees.
 */
enum LmretStatus lmret_haversine_km(double lat1,
                                    double lon1,
                                    double lat2,
                                    double lon2,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMRET_H */
