#ifndef FLATLAB_H
#define FLATLAB_H

/* Generated by cbindgen from src/lib.rs. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum FlatlabStatus {
  FLATLAB_STATUS_OK = 0,
  FLATLAB_STATUS_NULL_POINTER = 1,
  /**
   * Bad sizes, indices or configuration.
   */
  FLATLAB_STATUS_VALIDATION = 2,
  /**
   * A numerical routine failed (non-finite values, no convergence).
   */
  FLATLAB_STATUS_NUMERIC = 3,
  FLATLAB_STATUS_IO = 4,
  /**
   * The output buffer is too small; the required length was written.
   */
  FLATLAB_STATUS_BUFFER_TOO_SMALL = 5,
  FLATLAB_STATUS_PANIC = 6,
} FlatlabStatus;

/**
 * A labeled sample in input space.
 */
typedef struct FlatlabDataset FlatlabDataset;

/**
 * A network loaded from a checkpoint.
 */
typedef struct FlatlabModel FlatlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *flatlab_last_error(void);

/**
 * Library version as a static string.
 */
const char *flatlab_version(void);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum FlatlabStatus flatlab_model_load(const char *path, struct FlatlabModel **out);

/**
 * Parse a checkpoint from its JSON text.
 *
 * # Safety
 * `json` must be a valid C string and `out` a valid pointer.
 */
enum FlatlabStatus flatlab_model_from_json(const char *json, struct FlatlabModel **out);

/**
 * # Safety
 * `m` must come from a `flatlab_model_*` constructor and not be used again.
 */
void flatlab_model_free(struct FlatlabModel *m);

/**
 * Number of layers, input width and output width.
 *
 * # Safety
 * `m` must be a live model; output pointers may be null.
 */
enum FlatlabStatus flatlab_model_shape(const struct FlatlabModel *m,
                                       size_t *depth,
                                       size_t *input_dim,
                                       size_t *output_dim);

/**
 * Network outputs for `rows` inputs stored row-major in `x`
 * (`rows × input_dim`). Writes `rows × output_dim` values to `out`.
 *
 * # Safety
 * `x` must hold `rows * cols` values and `out` `out_capacity` values.
 */
enum FlatlabStatus flatlab_model_forward(const struct FlatlabModel *m,
                                         const double *x,
                                         size_t rows,
                                         size_t cols,
                                         double *out,
                                         size_t out_capacity,
                                         size_t *out_len);

/**
 * Dataset with class labels.
 *
 * # Safety
 * `x` must hold `rows * cols` values and `labels` `rows` values.
 */
enum FlatlabStatus flatlab_dataset_from_classes(const double *x,
                                                size_t rows,
                                                size_t cols,
                                                const uint64_t *labels,
                                                struct FlatlabDataset **out);

/**
 * Dataset with real-valued targets stored row-major (`rows × target_dim`).
 *
 * # Safety
 * `x` must hold `rows * cols` values and `targets` `rows * target_dim`.
 */
enum FlatlabStatus flatlab_dataset_from_targets(const double *x,
                                                size_t rows,
                                                size_t cols,
                                                const double *targets,
                                                size_t target_dim,
                                                struct FlatlabDataset **out);

/**
 * # Safety
 * `d` must come from a `flatlab_dataset_*` constructor and not be used again.
 */
void flatlab_dataset_free(struct FlatlabDataset *d);

/**
 * κ_Tr and κ_max of the model split at `layer` (1-based; 0 selects the last
 * layer).
 *
 * # Safety
 * Handles must be live; output pointers must be valid.
 */
enum FlatlabStatus flatlab_relative_flatness(const struct FlatlabModel *m,
                                             const struct FlatlabDataset *d,
                                             size_t layer,
                                             double *kappa_tr,
                                             double *kappa_max);

/**
 * The `d × d` matrix `T[s,s'] = Tr(H_{s,s'})` over the `d` neurons of
 * `layer`, row-major.
 *
 * # Safety
 * Handles must be live; `out` must hold `out_capacity` values.
 */
enum FlatlabStatus flatlab_trace_matrix(const struct FlatlabModel *m,
                                        const struct FlatlabDataset *d,
                                        size_t layer,
                                        double *out,
                                        size_t out_capacity,
                                        size_t *out_len);

/**
 * A Haar-distributed `m × m` orthogonal matrix, row-major, from `seed`.
 *
 * # Safety
 * `out` must hold `out_capacity` values.
 */
enum FlatlabStatus flatlab_haar_sample(size_t m,
                                       uint64_t seed,
                                       double *out,
                                       size_t out_capacity,
                                       size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLATLAB_H */
