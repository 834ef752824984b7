#ifndef GEOMIX_H
#define GEOMIX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GeomixMode {
  GEOMIX_MODE_NODE_PERM = 0,
  GEOMIX_MODE_ROTATION = 1,
  GEOMIX_MODE_GRAPH_PERM = 2,
} GeomixMode;

typedef enum GeomixStatus {
  GEOMIX_STATUS_OK = 0,
  GEOMIX_STATUS_NULL_POINTER = 1,
  GEOMIX_STATUS_INVALID_ARGUMENT = 2,
  GEOMIX_STATUS_IO = 3,
  GEOMIX_STATUS_PARSE = 4,
  GEOMIX_STATUS_VALIDATION = 5,
  GEOMIX_STATUS_CONFIG = 6,
  GEOMIX_STATUS_CHECKPOINT = 7,
  GEOMIX_STATUS_NUMERIC = 8,
  GEOMIX_STATUS_CAPACITY = 9,
  GEOMIX_STATUS_BUFFER_TOO_SMALL = 10,
  GEOMIX_STATUS_INTERNAL = 11,
} GeomixStatus;

/**
 * Parsed mixture systems.
 */
typedef struct GeomixDataset GeomixDataset;

/**
 * A loaded checkpoint.
 */
typedef struct GeomixModel GeomixModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *geomix_last_error(void);

/**
 * Library version, static storage.
 */
const char *geomix_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `model_out` writable.
 */
enum GeomixStatus geomix_model_load(const char *path, struct GeomixModel **model_out);

/**
 * # Safety
 * `model` must come from [`geomix_model_load`] and not be freed yet; null is ignored.
 */
void geomix_model_free(struct GeomixModel *model);

/**
 * # Safety
 * `model` must be a live handle and `count_out` writable.
 */
enum GeomixStatus geomix_model_num_parameters(const struct GeomixModel *model, size_t *count_out);

/**
 * Radius graph cutoff the model was trained with, Å.
 *
 * # Safety
 * `model` must be a live handle and `cutoff_out` writable.
 */
enum GeomixStatus geomix_model_cutoff(const struct GeomixModel *model, double *cutoff_out);

/**
 * Parses a JSON-lines dataset with graphs built at the model's cutoff.
 *
 * # Safety
 * `model` must be a live handle, `path` NUL-terminated and `dataset_out` writable.
 */
enum GeomixStatus geomix_dataset_load(const struct GeomixModel *model,
                                      const char *path,
                                      struct GeomixDataset **dataset_out);

/**
 * # Safety
 * `dataset` must come from [`geomix_dataset_load`] and not be freed yet; null is ignored.
 */
void geomix_dataset_free(struct GeomixDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle and `len_out` writable.
 */
enum GeomixStatus geomix_dataset_len(const struct GeomixDataset *dataset, size_t *len_out);

/**
 * Measured conductivity of system `index`, mS/cm.
 *
 * # Safety
 * `dataset` must be a live handle and `target_out` writable.
 */
enum GeomixStatus geomix_dataset_target(const struct GeomixDataset *dataset,
                                        size_t index,
                                        double *target_out);

/**
 * Writes one prediction per system, in mS/cm, in dataset order.
 * `capacity` is the length of `predictions`.
 *
 * # Safety
 * Both handles must be live and `predictions` must hold `capacity` doubles.
 */
enum GeomixStatus geomix_predict(const struct GeomixModel *model,
                                 const struct GeomixDataset *dataset,
                                 double *predictions,
                                 size_t capacity);

/**
 * Certifies one symmetry of the model on the dataset. `mode` is a
 * [`GeomixMode`] value. Permutation modes are checked exactly; rotations
 * at `tol` relative deviation.
 *
 * # Safety
 * Both handles must be live; `max_rel_dev_out` and `pass_out` writable.
 */
enum GeomixStatus geomix_verify(const struct GeomixModel *model,
                                const struct GeomixDataset *dataset,
                                int32_t mode,
                                size_t trials,
                                double tol,
                                uint64_t seed,
                                double *max_rel_dev_out,
                                bool *pass_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOMIX_H */
