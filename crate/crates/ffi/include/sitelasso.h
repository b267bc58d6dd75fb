#ifndef SITELASSO_H
#define SITELASSO_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_NUMERICAL = 1,
  SL_STATUS_CONFIG = 2,
  SL_STATUS_DATA = 3,
  SL_STATUS_NULL_POINTER = 4,
  SL_STATUS_INVALID_UTF8 = 5,
  SL_STATUS_BUFFER_TOO_SMALL = 6,
  SL_STATUS_PANIC = 7,
} SlStatus;

/**
 * Point observations.
 */
typedef struct SlDataset SlDataset;

/**
 * Train/validation split plan.
 */
typedef struct SlPlan SlPlan;

/**
 * Fitted method with its predictions and metrics.
 */
typedef struct SlRun SlRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null when none was recorded.
 * Valid until the next failing call on the same thread.
 */
const char *sl_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *sl_version(void);

/**
 * Reads a point CSV.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SlStatus sl_dataset_read_csv(const char *path, struct SlDataset **out);

/**
 * Points of the default two-site synthetic dataset for `seed`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SlStatus sl_dataset_synthetic(uint64_t seed, struct SlDataset **out);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t sl_dataset_len(const struct SlDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void sl_dataset_free(struct SlDataset *ds);

/**
 * Draws `n_splits` splits with `train_per_site` training rows at every site.
 *
 * # Safety
 * `ds` must be a live dataset handle and `out` a valid pointer.
 */
enum SlStatus sl_plan_new(const struct SlDataset *ds,
                          size_t n_splits,
                          size_t train_per_site,
                          uint64_t seed,
                          struct SlPlan **out);

/**
 * Number of splits, or 0 for a null handle.
 *
 * # Safety
 * `plan` must be null or a live plan handle.
 */
size_t sl_plan_n_splits(const struct SlPlan *plan);

/**
 * # Safety
 * `plan` must be null or a handle not yet freed.
 */
void sl_plan_free(struct SlPlan *plan);

/**
 * Fits one method (`m1-<site>`, `m2`, `m3` or `m4`) with default settings.
 *
 * # Safety
 * `ds` and `plan` must be live handles, `method` a NUL-terminated string
 * and `out` a valid pointer.
 */
enum SlStatus sl_run_method(const struct SlDataset *ds,
                            const struct SlPlan *plan,
                            const char *method,
                            size_t workers,
                            struct SlRun **out);

/**
 * R² and RMSE for `target`: a site id or `combined`.
 *
 * # Safety
 * `run` must be a live handle, `target` a NUL-terminated string and the
 * output pointers valid.
 */
enum SlStatus sl_run_metrics(const struct SlRun *run,
                             const char *target,
                             double *r_squared,
                             double *rmse);

/**
 * Number of ensemble members, or 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
size_t sl_run_n_members(const struct SlRun *run);

/**
 * Copies the per-row predictions into `buf`. `len` must be at least the
 * dataset length; the count written goes to `written`.
 *
 * # Safety
 * `run` must be a live handle, `buf` valid for `len` writes and `written`
 * a valid pointer.
 */
enum SlStatus sl_run_predictions(const struct SlRun *run, double *buf, size_t len, size_t *written);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void sl_run_free(struct SlRun *run);

/**
 * Runs the pipeline described by a TOML config and writes its outputs.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
enum SlStatus sl_run_config(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SITELASSO_H */
