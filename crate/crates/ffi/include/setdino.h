#ifndef SETDINO_H
#define SETDINO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. 2 to 5 match the exit codes of the command-line tool.
 */
typedef enum SdStatus {
  SD_STATUS_OK = 0,
  SD_STATUS_CONFIG = 2,
  SD_STATUS_DATA = 3,
  SD_STATUS_NUMERIC = 4,
  SD_STATUS_IO = 5,
  SD_STATUS_NULL_ARGUMENT = 10,
  SD_STATUS_INVALID_ARGUMENT = 11,
  SD_STATUS_PANIC = 12,
} SdStatus;

/**
 * Resolved experiment configuration.
 */
typedef struct SdConfig SdConfig;

/**
 * Embedding table (features plus row metadata).
 */
typedef struct SdTable SdTable;

/**
 * Set of related gene pairs.
 */
typedef struct SdTruth SdTruth;

typedef struct SdBatchMetrics {
  double reproducibility_knn;
  double reproducibility_map;
  double batch_knn;
  double graph_connectivity;
} SdBatchMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *sd_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sd_version(void);

/**
 * Empty batch-level gene table of dimension `dim`.
 */
enum SdStatus sd_table_new(size_t dim, struct SdTable **out);

/**
 * Append one (gene, batch) row. `batch_id < 0` means no batch.
 */
enum SdStatus sd_table_push(struct SdTable *table,
                            const char *gene,
                            int64_t batch_id,
                            const double *features,
                            size_t len);

/**
 * Read `<dir>/<name>.json` and `<dir>/<name>.bin`.
 */
enum SdStatus sd_table_read(const char *dir, const char *name, struct SdTable **out);

enum SdStatus sd_table_write(const struct SdTable *table, const char *dir, const char *name);

enum SdStatus sd_table_shape(const struct SdTable *table, size_t *rows, size_t *dim);

/**
 * Copy row `row` into `buf` (length `len` must equal the dimension).
 */
enum SdStatus sd_table_row(const struct SdTable *table, size_t row, double *buf, size_t len);

void sd_table_free(struct SdTable *table);

/**
 * NTC-centred consensus gene profiles of a batch-level gene table. The NTC
 * rows must use the gene name "NTC".
 */
enum SdStatus sd_consensus_profiles(const struct SdTable *table, struct SdTable **out);

/**
 * Reproducibility and batch-effect metrics of a batch-level gene table.
 */
enum SdStatus sd_batch_level_metrics(const struct SdTable *table,
                                     size_t k,
                                     struct SdBatchMetrics *out);

/**
 * Gene pairs from a two-column CSV with a header row.
 */
enum SdStatus sd_truth_read_csv(const char *path, struct SdTruth **out);

/**
 * Gene pairs from two parallel arrays of `n` names.
 */
enum SdStatus sd_truth_from_pairs(const char *const *a,
                                  const char *const *b,
                                  size_t n,
                                  struct SdTruth **out);

void sd_truth_free(struct SdTruth *truth);

/**
 * Recall and precision of the top-`percentile`% most similar gene pairs of
 * a consensus table.
 */
enum SdStatus sd_recall_precision(const struct SdTable *consensus,
                                  const struct SdTruth *truth,
                                  double percentile,
                                  double *recall,
                                  double *precision);

/**
 * Kolmogorov-Smirnov statistic between truth-pair and other-pair similarities.
 */
enum SdStatus sd_similarity_ks(const struct SdTable *consensus,
                               const struct SdTruth *truth,
                               double *ks);

/**
 * Load a TOML config (`path` may be null for the defaults).
 */
enum SdStatus sd_config_load(const char *path, struct SdConfig **out);

/**
 * Override one dotted key, e.g. `train.epochs` = `5`. Values use TOML syntax.
 */
enum SdStatus sd_config_set(struct SdConfig *config, const char *key, const char *value);

void sd_config_free(struct SdConfig *config);

/**
 * Generate the synthetic screen into `out_dir`.
 */
enum SdStatus sd_synth(const struct SdConfig *config, const char *out_dir);

/**
 * Train on `data_dir`, writing the checkpoint into `out_dir`.
 */
enum SdStatus sd_train(const struct SdConfig *config, const char *data_dir, const char *out_dir);

/**
 * Write the profile tables of `data_dir` into `out_dir`. `checkpoint` may
 * be null when the config selects engineered features.
 */
enum SdStatus sd_embed(const struct SdConfig *config,
                       const char *checkpoint,
                       const char *data_dir,
                       const char *out_dir);

/**
 * Evaluate the tables in `tables_dir`. `curated_csv` may be null.
 */
enum SdStatus sd_evaluate(const struct SdConfig *config,
                          const char *tables_dir,
                          const char *truth_csv,
                          const char *curated_csv,
                          const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SETDINO_H */
