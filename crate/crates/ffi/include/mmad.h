#ifndef MMAD_H
#define MMAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmadStatus {
  MMAD_STATUS_OK = 0,
  MMAD_STATUS_NULL_ARGUMENT = 1,
  MMAD_STATUS_CONTRACT_VIOLATION = 2,
  MMAD_STATUS_DIVERGED = 3,
  MMAD_STATUS_EMPTY_IMAGE = 4,
  MMAD_STATUS_DEGENERATE_LABELS = 5,
  MMAD_STATUS_NO_REGIONS = 6,
  MMAD_STATUS_FPR_UNDEFINED = 7,
  MMAD_STATUS_NO_NOMINAL_DATA = 8,
  MMAD_STATUS_MODALITY_UNAVAILABLE = 9,
  MMAD_STATUS_PROTOCOL_VIOLATION = 10,
  MMAD_STATUS_PARSE_ERROR = 11,
  MMAD_STATUS_SCHEMA_ERROR = 12,
  MMAD_STATUS_INVALID_CONFIG = 13,
  MMAD_STATUS_IO_ERROR = 14,
  MMAD_STATUS_INVALID_UTF8 = 15,
  MMAD_STATUS_PANIC = 16,
} MmadStatus;

/**
 * `H x W` anomaly score grid.
 */
typedef struct MmadAnomalyMap MmadAnomalyMap;

/**
 * Dense `H x W x C` feature grid with a validity mask.
 */
typedef struct MmadFeatureMap MmadFeatureMap;

/**
 * Trained networks loaded from a checkpoint directory.
 */
typedef struct MmadModel MmadModel;

/**
 * Fusion parameters; the smoothing schedule is fixed to the defaults.
 */
typedef struct MmadFusionParams {
  double temperature;
  double eps;
  size_t gate_window;
  double gate_steepness;
  /**
   * 0 = full, 1..6 = the reduced variants.
   */
  uint32_t variant;
} MmadFusionParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mmad_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mmad_version(void);

/**
 * Copies `values` (row-major `H x W x C`) and `validity` (`H x W`, null for
 * all valid) into a new feature map.
 *
 * # Safety
 * `values` must hold `h*w*c` doubles and `validity`, when non-null, `h*w`
 * bytes. `out` must be writable.
 */
enum MmadStatus mmad_feature_map_new(size_t h,
                                     size_t w,
                                     size_t c,
                                     const double *values,
                                     const uint8_t *validity,
                                     struct MmadFeatureMap **out);

/**
 * # Safety
 * `map` must come from [`mmad_feature_map_new`] and not be freed twice.
 */
void mmad_feature_map_free(struct MmadFeatureMap *map);

/**
 * Copies `scores` and `validity` (null for all valid) into a new map.
 * Scores at invalid pixels are forced to 0.
 *
 * # Safety
 * `scores` must hold `h*w` doubles and `validity`, when non-null, `h*w` bytes.
 */
enum MmadStatus mmad_anomaly_map_new(size_t h,
                                     size_t w,
                                     const double *scores,
                                     const uint8_t *validity,
                                     struct MmadAnomalyMap **out);

/**
 * # Safety
 * `map` must be a live handle; `h` and `w` must be writable.
 */
enum MmadStatus mmad_anomaly_map_dims(const struct MmadAnomalyMap *map, size_t *h, size_t *w);

/**
 * Copies the `H*W` scores into `buf`, which must hold exactly that many.
 *
 * # Safety
 * `buf` must be writable for `len` doubles.
 */
enum MmadStatus mmad_anomaly_map_scores(const struct MmadAnomalyMap *map, double *buf, size_t len);

/**
 * # Safety
 * `map` must come from this library and not be freed twice.
 */
void mmad_anomaly_map_free(struct MmadAnomalyMap *map);

/**
 * Loads a checkpoint directory written by `mmad train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum MmadStatus mmad_model_load(const char *dir, struct MmadModel **out);

/**
 * # Safety
 * `model` must come from [`mmad_model_load`] and not be freed twice.
 */
void mmad_model_free(struct MmadModel *model);

struct MmadFusionParams mmad_fusion_params_default(void);

/**
 * Normalized Euclidean distance between two feature vectors.
 *
 * # Safety
 * `a` and `b` must each hold `len` doubles; `out` must be writable.
 */
enum MmadStatus mmad_normalized_distance(const double *a, const double *b, size_t len, double *out);

/**
 * Raw fused map from the four discrepancy maps. `params` may be null for
 * the defaults.
 *
 * # Safety
 * All handles must be live; `out` must be writable.
 */
enum MmadStatus mmad_fuse(const struct MmadAnomalyMap *d2d_map,
                          const struct MmadAnomalyMap *d3d_map,
                          const struct MmadAnomalyMap *d2d_rec,
                          const struct MmadAnomalyMap *d3d_rec,
                          const struct MmadFusionParams *params_ptr,
                          struct MmadAnomalyMap **out);

/**
 * Smoothed, normalized final map and its image score.
 *
 * # Safety
 * `psi` must be live; `out_map` and `out_score` must be writable.
 */
enum MmadStatus mmad_finalize(const struct MmadAnomalyMap *psi,
                              const struct MmadFusionParams *params_ptr,
                              struct MmadAnomalyMap **out_map,
                              double *out_score);

/**
 * Scores one sample with a loaded model. Pass null for a modality the
 * model's mode does not use.
 *
 * # Safety
 * Handles must be live or null; `out_map` and `out_score` must be writable.
 */
enum MmadStatus mmad_infer(const struct MmadModel *model,
                           const struct MmadFeatureMap *f2,
                           const struct MmadFeatureMap *f3,
                           const struct MmadFusionParams *params_ptr,
                           struct MmadAnomalyMap **out_map,
                           double *out_score);

/**
 * Rank-based AUROC with midranks for ties.
 *
 * # Safety
 * `scores` and `labels` must each hold `n` elements; `out` must be writable.
 */
enum MmadStatus mmad_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Normalized area under the per-region overlap curve up to `fpr_limit`.
 * `gts[i]` is an `H*W` mask matching `maps[i]`.
 *
 * # Safety
 * `maps` and `gts` must each hold `n` valid pointers; `out` must be writable.
 */
enum MmadStatus mmad_aupro(const struct MmadAnomalyMap *const *maps,
                           const uint8_t *const *gts,
                           size_t n,
                           double fpr_limit,
                           double *out);

/**
 * Isolation-forest outlier mask flagging `ceil(contamination * n)` points.
 *
 * # Safety
 * `points` must hold `3*n` doubles (xyz rows); `out_mask` must hold `n` bytes.
 */
enum MmadStatus mmad_iso_outlier_mask(const double *points,
                                      size_t n,
                                      double contamination,
                                      size_t trees,
                                      size_t subsample,
                                      uint64_t seed,
                                      uint8_t *out_mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMAD_H */
