#ifndef SETPRED_H
#define SETPRED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Dataset partitions.
 */
typedef enum SpSplit {
  SP_SPLIT_TRAIN = 0,
  SP_SPLIT_VAL = 1,
  SP_SPLIT_TEST = 2,
} SpSplit;

/**
 * Result codes.
 */
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_ARGUMENT = 2,
  SP_STATUS_DATA = 3,
  SP_STATUS_DIVERGED = 4,
  SP_STATUS_IO = 5,
  SP_STATUS_BUFFER_TOO_SMALL = 6,
  SP_STATUS_INTERNAL = 7,
  SP_STATUS_PANIC = 8,
} SpStatus;

/**
 * Opaque dataset handle.
 */
typedef struct SpDataset SpDataset;

/**
 * Opaque trained-model handle: full training state plus its best model.
 */
typedef struct SpModel SpModel;

/**
 * Set-prediction scores of one split.
 */
typedef struct SpMetrics {
  double o_f1;
  double c_f1;
  double i_f1;
  double cardinality_error;
  double cardinality_ci;
} SpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *sp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sp_version(void);

/**
 * Generates a synthetic dataset. `spec_json` holds synthetic spec fields
 * (missing ones take preset values); null means the preset itself.
 *
 * # Safety
 * `spec_json` must be null or a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_dataset_generate(const char *spec_json, uint64_t seed, struct SpDataset **out);

/**
 * Reads an FSET file (and its manifest, if present).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_dataset_load(const char *path, struct SpDataset **out);

/**
 * Writes an FSET file and its manifest.
 *
 * # Safety
 * `ds` must come from this library; `path` must be a NUL-terminated string.
 */
enum SpStatus sp_dataset_save(const struct SpDataset *ds, const char *path);

/**
 * Releases a dataset; null is ignored.
 *
 * # Safety
 * `ds` must be null or come from this library and not be used afterwards.
 */
void sp_dataset_free(struct SpDataset *ds);

/**
 * Number of samples and labels of a dataset.
 *
 * # Safety
 * `ds` must come from this library; both outputs must be writable.
 */
enum SpStatus sp_dataset_shape(const struct SpDataset *ds, size_t *n_samples, size_t *n_labels);

/**
 * Ground-truth labels of one sample, in dataset order.
 *
 * # Safety
 * `ds` must come from this library; `buf` must hold `cap` values; `len` must be writable.
 */
enum SpStatus sp_dataset_labels(const struct SpDataset *ds,
                                size_t index,
                                uint32_t *buf,
                                size_t cap,
                                size_t *len);

/**
 * Trains `family` (e.g. "FF_BCE", "TF_set") for `epochs` epochs.
 * `hyper_json` is a JSON object of hyperparameter overrides or null.
 * A run that diverges before its first evaluation yields `SP_STATUS_DIVERGED`.
 *
 * # Safety
 * `ds` must come from this library; strings must be NUL-terminated or null
 * where allowed; `out` must be writable.
 */
enum SpStatus sp_model_train(const struct SpDataset *ds,
                             const char *family_name,
                             const char *hyper_json,
                             uint64_t seed,
                             size_t epochs,
                             struct SpModel **out);

/**
 * Loads a checkpoint written by `sp_model_save` or the command-line tool.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_model_load(const char *path, struct SpModel **out);

/**
 * Saves the complete training state.
 *
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum SpStatus sp_model_save(const struct SpModel *model, const char *path);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or come from this library and not be used afterwards.
 */
void sp_model_free(struct SpModel *model);

/**
 * Decodes every sample of a split with the model's decode rule and scores it.
 *
 * # Safety
 * `model` and `ds` must come from this library; `out` must be writable.
 */
enum SpStatus sp_model_evaluate(struct SpModel *model,
                                const struct SpDataset *ds,
                                enum SpSplit split,
                                struct SpMetrics *out);

/**
 * Predicted label set of one sample. Auto-regressive models report labels
 * in emission order, feed-forward models in ascending order.
 *
 * # Safety
 * `model` and `ds` must come from this library; `buf` must hold `cap`
 * values; `len` must be writable.
 */
enum SpStatus sp_model_predict(struct SpModel *model,
                               const struct SpDataset *ds,
                               size_t index,
                               uint32_t *buf,
                               size_t cap,
                               size_t *len);

/**
 * Scores flattened label sets. Sample `i` owns
 * `labels[offsets[i]..offsets[i + 1]]`; both offset arrays have `n + 1` entries.
 *
 * # Safety
 * Every pointer must reference arrays of the documented lengths.
 */
enum SpStatus sp_f1_report(size_t n_samples,
                           size_t n_labels,
                           const uint32_t *gt_labels,
                           const size_t *gt_offsets,
                           const uint32_t *pred_labels,
                           const size_t *pred_offsets,
                           struct SpMetrics *out);

/**
 * Number of configurations and largest per-configuration resource of a
 * Hyperband plan.
 *
 * # Safety
 * Both outputs must be writable.
 */
enum SpStatus sp_hyperband_plan(uint64_t eta,
                                uint64_t big_r,
                                size_t *total_configs,
                                uint64_t *max_resource);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SETPRED_H */
