#ifndef TAN_GCD_H
#define TAN_GCD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TgStatus {
  TG_STATUS_OK = 0,
  TG_STATUS_NULL_POINTER = 1,
  TG_STATUS_INVALID_ARGUMENT = 2,
  TG_STATUS_INVALID_CONFIG = 3,
  TG_STATUS_IO = 4,
  TG_STATUS_PARSE = 5,
  TG_STATUS_SHAPE = 6,
  TG_STATUS_NON_FINITE = 7,
  TG_STATUS_CHECKPOINT = 8,
  TG_STATUS_PANIC = 9,
} TgStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct TgDataset TgDataset;

/**
 * An encoder head with its classifier.
 */
typedef struct TgHead TgHead;

/**
 * Test-split scores in [0, 1]. Unavailable entries are NaN.
 */
typedef struct TgMetrics {
  double h_score;
  double known_acc;
  double novel_acc;
  double overall_acc;
  double pseudo_label_acc;
} TgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *tg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tg_version(void);

/**
 * Load a feature file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TgStatus tg_dataset_load(const char *path, struct TgDataset **out);

/**
 * Draw a synthetic dataset from a named preset ("acceptance" or "banking").
 * When `truth_path` is non-NULL the true centers are written there.
 *
 * # Safety
 * `preset` must be a NUL-terminated string, `truth_path` NULL or one;
 * `out` must be writable.
 */
enum TgStatus tg_dataset_generate(const char *preset,
                                  uint64_t seed,
                                  const char *truth_path,
                                  struct TgDataset **out);

/**
 * Write a dataset as a feature file.
 *
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum TgStatus tg_dataset_save(const struct TgDataset *ds, const char *path);

/**
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void tg_dataset_free(struct TgDataset *ds);

/**
 * Number of instances, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t tg_dataset_len(const struct TgDataset *ds);

/**
 * Embedding dimension, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t tg_dataset_dim(const struct TgDataset *ds);

/**
 * Number of categories, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t tg_dataset_num_categories(const struct TgDataset *ds);

/**
 * Number of categories with labeled instances, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t tg_dataset_num_known(const struct TgDataset *ds);

/**
 * Harmonic mean of known and novel accuracy; 0 when either is 0.
 */
double tg_h_score(double known, double novel);

/**
 * Minimum-cost assignment on a `rows x cols` cost matrix. Writes, for each
 * row, its column or -1 when unassigned (only possible if rows > cols).
 *
 * # Safety
 * `cost` must hold `rows * cols` doubles, `row_to_col` `rows` slots;
 * `total_cost` may be NULL.
 */
enum TgStatus tg_hungarian(const double *cost,
                           size_t rows,
                           size_t cols,
                           int64_t *row_to_col,
                           double *total_cost);

/**
 * Clustering accuracy of `pred` against `gt` under the best one-to-one
 * cluster-to-category mapping.
 *
 * # Safety
 * `pred` and `gt` must hold `n` values; `out` must be writable.
 */
enum TgStatus tg_hungarian_accuracy(const uint32_t *pred,
                                    const uint32_t *gt,
                                    size_t n,
                                    double *out);

/**
 * k-means++ with restarts. `assignment` receives `n` cluster ids, `centers`
 * (may be NULL) `k * dim` values, `inertia` (may be NULL) the final inertia.
 *
 * # Safety
 * Buffer sizes must match the arguments.
 */
enum TgStatus tg_kmeans(const double *points,
                        size_t n,
                        size_t dim,
                        size_t k,
                        uint64_t seed,
                        uint32_t *assignment,
                        double *centers,
                        double *inertia);

/**
 * Calibrate `n_unlabeled` prototypes with `n_labeled` labeled ones using the
 * `k` nearest labeled prototypes and weight `alpha` on the original.
 * Writes `n_unlabeled * dim` values to `out`.
 *
 * # Safety
 * Buffer sizes must match the arguments.
 */
enum TgStatus tg_calibrate(const double *unlabeled,
                           size_t n_unlabeled,
                           const double *labeled,
                           size_t n_labeled,
                           size_t dim,
                           size_t k,
                           double alpha,
                           double *out);

/**
 * Load a head checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TgStatus tg_head_load(const char *path, struct TgHead **out);

/**
 * Save a head checkpoint.
 *
 * # Safety
 * `head` must be a live handle and `path` a NUL-terminated string.
 */
enum TgStatus tg_head_save(const struct TgHead *head, const char *path);

/**
 * # Safety
 * `head` must be NULL or a handle not yet freed.
 */
void tg_head_free(struct TgHead *head);

/**
 * Output feature dimension, or 0 for NULL.
 *
 * # Safety
 * `head` must be NULL or a live handle.
 */
size_t tg_head_output_dim(const struct TgHead *head);

/**
 * Eval-mode features of one input vector of length `in_dim`, written to
 * `out` (capacity `out_dim`, which must equal the head's output dimension).
 *
 * # Safety
 * Buffer sizes must match the arguments.
 */
enum TgStatus tg_head_embed(const struct TgHead *head,
                            const double *x,
                            size_t in_dim,
                            double *out,
                            size_t out_dim);

/**
 * Initialize and pretrain a head on the labeled split.
 *
 * # Safety
 * `ds` must be a live handle, `config_json` NULL or a NUL-terminated
 * string; `out` must be writable.
 */
enum TgStatus tg_pretrain(const struct TgDataset *ds, const char *config_json, struct TgHead **out);

/**
 * Alignment training starting from a copy of `pretrained`. The trained head
 * goes to `out`; final-epoch test metrics to `metrics` (may be NULL).
 *
 * # Safety
 * Handles must be live, `config_json` NULL or a NUL-terminated string;
 * `out` must be writable.
 */
enum TgStatus tg_train(const struct TgDataset *ds,
                       const struct TgHead *pretrained,
                       const char *config_json,
                       struct TgHead **out,
                       struct TgMetrics *metrics);

/**
 * Cluster the test split's features into `k_clusters` groups and score them.
 *
 * # Safety
 * Handles must be live; `metrics` must be writable.
 */
enum TgStatus tg_evaluate(const struct TgDataset *ds,
                          const struct TgHead *head,
                          size_t k_clusters,
                          uint64_t seed,
                          struct TgMetrics *metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAN_GCD_H */
