#ifndef MTLKIT_H
#define MTLKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MtlStatus {
  MTL_STATUS_OK = 0,
  MTL_STATUS_NULL_POINTER = 1,
  MTL_STATUS_INVALID_ARGUMENT = 2,
  MTL_STATUS_IO = 3,
  MTL_STATUS_PARSE = 4,
  MTL_STATUS_DIMENSION_MISMATCH = 5,
  MTL_STATUS_NO_POSITIVES = 6,
  MTL_STATUS_BAD_CHECKPOINT = 7,
  MTL_STATUS_INTERNAL = 8,
} MtlStatus;

/**
 * A loaded manifest with its images.
 */
typedef struct MtlDataset MtlDataset;

/**
 * A loaded checkpoint and its evaluation geometry.
 */
typedef struct MtlModel MtlModel;

/**
 * Metrics of a model on a dataset. Values that do not apply are NaN.
 */
typedef struct MtlMetrics {
  double map_class;
  double map_image;
  double top1;
  double top3;
} MtlMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mtl_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *mtl_last_error(void);

/**
 * Average precision of one ranking. `labels` holds 0/1 flags.
 *
 * # Safety
 * `scores` and `labels` must point to `n` readable elements; `out` must be
 * writable.
 */
enum MtlStatus mtl_average_precision(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double *out);

/**
 * Class-wise mean AP over an `n x p` score matrix; classes without
 * positives are skipped.
 *
 * # Safety
 * `scores` and `labels` must point to `n * p` readable elements; `out` must
 * be writable.
 */
enum MtlStatus mtl_map_class(const double *scores,
                             const uint8_t *labels,
                             size_t n,
                             size_t p,
                             double *out);

/**
 * Image-wise mean AP over an `n x p` score matrix; images without
 * positives are skipped.
 *
 * # Safety
 * As for [`mtl_map_class`].
 */
enum MtlStatus mtl_map_image(const double *scores,
                             const uint8_t *labels,
                             size_t n,
                             size_t p,
                             double *out);

/**
 * Top-`k` accuracy of an `n x q` location score matrix against 1-based
 * true locations.
 *
 * # Safety
 * `scores` must point to `n * q` readable values, `locations` to `n`;
 * `out` must be writable.
 */
enum MtlStatus mtl_top_k_accuracy(const double *scores,
                                  const size_t *locations,
                                  size_t n,
                                  size_t q,
                                  size_t k,
                                  double *out);

/**
 * Element-wise maximum of two equally sized buffers. `out` may alias
 * either input.
 *
 * # Safety
 * `a`, `b` and `out` must each point to `len` valid elements.
 */
enum MtlStatus mtl_ensemble_max(const double *a, const double *b, size_t len, double *out);

/**
 * Loads a checkpoint written by `mtlkit train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MtlStatus mtl_model_load(const char *path, struct MtlModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mtl_model_load`] and not be used afterwards.
 */
void mtl_model_free(struct MtlModel *model);

/**
 * Number of lesion outputs; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mtl_model_num_lesions(const struct MtlModel *model);

/**
 * Number of location outputs; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mtl_model_num_locations(const struct MtlModel *model);

/**
 * Image channels the model expects; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mtl_model_in_channels(const struct MtlModel *model);

/**
 * Scores one `channels x height x width` image with values in [0, 1].
 * Writes sigmoid lesion scores and softmax location scores, averaged over
 * ten crops when `ten_crop` is set.
 *
 * # Safety
 * `pixels` must point to `channels * height * width` values;
 * `lesion_out` and `location_out` must hold the model's lesion and location
 * counts.
 */
enum MtlStatus mtl_model_predict(const struct MtlModel *model,
                                 const double *pixels,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 bool ten_crop,
                                 double *lesion_out,
                                 double *location_out);

/**
 * Loads a manifest and its images.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MtlStatus mtl_dataset_load(const char *path, struct MtlDataset **out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `dataset` must come from [`mtl_dataset_load`] and not be used afterwards.
 */
void mtl_dataset_free(struct MtlDataset *dataset);

/**
 * Sample count; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t mtl_dataset_len(const struct MtlDataset *dataset);

/**
 * Lesion label count; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t mtl_dataset_num_lesions(const struct MtlDataset *dataset);

/**
 * Location label count; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t mtl_dataset_num_locations(const struct MtlDataset *dataset);

/**
 * Lesion/location co-occurrence matrix, row-major `P x Q`.
 *
 * # Safety
 * `out` must hold `out_len` values; `out_len` must equal P * Q.
 */
enum MtlStatus mtl_dataset_correlation(const struct MtlDataset *dataset,
                                       double *out,
                                       size_t out_len);

/**
 * Scores every sample and reports both heads' metrics.
 *
 * # Safety
 * `model` and `dataset` must be live handles; `out` must be writable.
 */
enum MtlStatus mtl_evaluate(const struct MtlModel *model,
                            const struct MtlDataset *dataset,
                            bool ten_crop,
                            struct MtlMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTLKIT_H */
