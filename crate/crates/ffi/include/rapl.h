#ifndef RAPL_H
#define RAPL_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Protocol codes accepted by [`rapl_experiment_accuracy`].
 */
#define RAPL_PROTOCOL_TASK_AGNOSTIC 0

#define RAPL_PROTOCOL_TASK_AWARE 1

/**
 * Split codes accepted by [`rapl_experiment_embeddings`].
 */
#define RAPL_SPLIT_LABELED_TRAIN 0

#define RAPL_SPLIT_UNLABELED_TRAIN 1

#define RAPL_SPLIT_TEST 2

typedef enum RaplStatus {
  RAPL_STATUS_OK = 0,
  RAPL_STATUS_NULL_POINTER = 1,
  RAPL_STATUS_INVALID_ARGUMENT = 2,
  RAPL_STATUS_DIMENSION = 3,
  RAPL_STATUS_NON_FINITE = 4,
  RAPL_STATUS_CONFIG = 5,
  RAPL_STATUS_STATE = 6,
  RAPL_STATUS_IO = 7,
  RAPL_STATUS_BUFFER_TOO_SMALL = 8,
  RAPL_STATUS_PANIC = 9,
} RaplStatus;

/**
 * A synthetic dataset plus its experiment config and, once run, the trained
 * state.
 */
typedef struct RaplExperiment RaplExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating to `capacity`. Returns the full message
 * length without the terminator; call with `buf = NULL` to size a buffer.
 *
 * # Safety
 * `buf` must be NULL or point to `capacity` writable bytes.
 */
size_t rapl_last_error_message(char *buf, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rapl_version(void);

/**
 * Minimum-cost assignment for a row-major `n×n` cost matrix.
 * `assignment[row]` receives the chosen column.
 *
 * # Safety
 * `cost` must hold `n*n` values and `assignment` room for `n`.
 */
enum RaplStatus rapl_hungarian(const double *cost, size_t n, size_t *assignment);

/**
 * Clustering accuracy of `y_pred` against `y_true` under the best
 * cluster-to-class bijection. Ids must be below `num_classes`.
 *
 * # Safety
 * `y_true` and `y_pred` must hold `n` values; `acc` must be writable.
 */
enum RaplStatus rapl_clustering_accuracy(const size_t *y_true,
                                         const size_t *y_pred,
                                         size_t n,
                                         size_t num_classes,
                                         double *acc);

/**
 * k-means with k-means++ seeding on `n` row-major points of dimension `d`.
 * `centroids` may be NULL; otherwise it receives `k*d` values.
 *
 * # Safety
 * `points` must hold `n*d` values, `assignments` room for `n`, and
 * `centroids` (if not NULL) room for `k*d`.
 */
enum RaplStatus rapl_kmeans(const double *points,
                            size_t n,
                            size_t d,
                            size_t k,
                            uint64_t seed,
                            size_t *assignments,
                            double *centroids);

/**
 * Region index of each of `d` channels when split over an `h×w` grid.
 *
 * # Safety
 * `group_of_channel` must have room for `d` values.
 */
enum RaplStatus rapl_channel_groups(size_t d, size_t h, size_t w, size_t *group_of_channel);

/**
 * Builds an experiment from TOML text (NULL or empty for defaults), applies
 * `seed` to data, initialization and training, and generates the dataset.
 *
 * # Safety
 * `config_toml` must be NULL or a NUL-terminated UTF-8 string; `out` must be
 * writable. The handle must be released with [`rapl_experiment_free`].
 */
enum RaplStatus rapl_experiment_new(const char *config_toml,
                                    uint64_t seed,
                                    struct RaplExperiment **out);

/**
 * Runs pre-training, discovery and the final evaluation.
 *
 * # Safety
 * `h` must come from [`rapl_experiment_new`] and not be freed.
 */
enum RaplStatus rapl_experiment_run(struct RaplExperiment *h);

/**
 * Final accuracy under `protocol`. `acc_old` and `acc_new` receive NaN when
 * the protocol does not report them; any of the three may be NULL.
 *
 * # Safety
 * `h` must be a live handle; non-NULL outputs must be writable.
 */
enum RaplStatus rapl_experiment_accuracy(struct RaplExperiment *h,
                                         uint32_t protocol,
                                         double *acc_all,
                                         double *acc_old,
                                         double *acc_new);

/**
 * Writes the trained embeddings of one split, row-major, and their extents.
 * With `out = NULL` only `rows` and `cols` are filled. Fails with
 * `BUFFER_TOO_SMALL` if `capacity < rows*cols`.
 *
 * # Safety
 * `h` must be a live handle; `out` must be NULL or hold `capacity` values;
 * `rows` and `cols` must be writable.
 */
enum RaplStatus rapl_experiment_embeddings(struct RaplExperiment *h,
                                           uint32_t split,
                                           double *out,
                                           size_t capacity,
                                           size_t *rows,
                                           size_t *cols);

/**
 * Class ids of one split in the row order of [`rapl_experiment_embeddings`].
 *
 * # Safety
 * `h` must be a live handle; `labels` must hold `capacity` values and
 * `count` be writable.
 */
enum RaplStatus rapl_experiment_labels(struct RaplExperiment *h,
                                       uint32_t split,
                                       size_t *labels,
                                       size_t capacity,
                                       size_t *count);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `h` must be NULL or a handle from [`rapl_experiment_new`] not yet freed.
 */
void rapl_experiment_free(struct RaplExperiment *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAPL_H */
