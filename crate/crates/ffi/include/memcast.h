/* memcast C API: memory-driven Transformer forecasting engine. */

#ifndef MEMCAST_H
#define MEMCAST_H

/* Generated from the Rust sources by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum McStatus {
  /**
   * Success.
   */
  MC_OK = 0,
  /**
   * Invalid usage or configuration (bad arguments, bad config file).
   */
  MC_ERR_USAGE = 1,
  /**
   * Data problem (unreadable file, malformed checkpoint, shape mismatch).
   */
  MC_ERR_DATA = 2,
  /**
   * Numeric failure (non-finite values, gradient-check failure).
   */
  MC_ERR_NUMERIC = 3,
  /**
   * A required pointer argument was NULL.
   */
  MC_ERR_NULL = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  MC_ERR_PANIC = 5,
} McStatus;

/**
 * Opaque forecasting session: a trained model, its task-level memory, and
 * the normalizer statistics it was fitted with.
 */
typedef struct McRunner McRunner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the linked engine, as a static string.
 */
const char *mc_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap` bytes) and returns the full message length
 * in bytes, or 0 when no error is pending. `buf` may be NULL to query the
 * length only.
 *
 * # Safety
 * `buf`, when non-NULL, must point to at least `cap` writable bytes.
 */
uintptr_t mc_last_error(char *buf, uintptr_t cap);

/**
 * Runs the gradient self-check battery. `MC_OK` when every check passes;
 * `MC_ERR_NUMERIC` (with details in the last error) otherwise.
 */
enum McStatus mc_selfcheck(bool inject_fault);

/**
 * Trains a model from a config file, writing checkpoint/history/config
 * artifacts. `out_dir` (optional, may be NULL) overrides the config's
 * output directory; `seed` overrides the run seed when non-negative.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated path; `out_dir` must be a
 * valid NUL-terminated path or NULL.
 */
enum McStatus mc_train(const char *config_path, const char *out_dir, int64_t seed);

/**
 * Generates a synthetic dataset CSV (see the CLI's `synth` verb).
 *
 * # Safety
 * `out_path` must be a valid NUL-terminated path.
 */
enum McStatus mc_synth(uintptr_t points, uintptr_t features, uint64_t seed, const char *out_path);

/**
 * Opens a checkpoint written by training and yields a runner handle in
 * `out`. On failure `*out` is left untouched and a status is returned.
 *
 * # Safety
 * `ckpt_path` must be a valid NUL-terminated path; `out` must point to
 * writable pointer storage.
 */
enum McStatus mc_runner_open(const char *ckpt_path, struct McRunner **out);

/**
 * Releases a runner. NULL is a no-op; the pointer must not be used again.
 *
 * # Safety
 * `runner` must be NULL or a pointer obtained from [`mc_runner_open`] that
 * has not been closed yet.
 */
void mc_runner_close(struct McRunner *runner);

/**
 * Number of input rows one forecast consumes (the context length).
 * Returns 0 on a NULL handle.
 *
 * # Safety
 * `runner` must be NULL or a live runner pointer.
 */
uintptr_t mc_runner_context_len(const struct McRunner *runner);

/**
 * Number of future steps one forecast produces. Returns 0 on NULL.
 *
 * # Safety
 * `runner` must be NULL or a live runner pointer.
 */
uintptr_t mc_runner_horizon(const struct McRunner *runner);

/**
 * Number of features per row (input and output width). Returns 0 on NULL.
 *
 * # Safety
 * `runner` must be NULL or a live runner pointer.
 */
uintptr_t mc_runner_feature_count(const struct McRunner *runner);

/**
 * How many times the task-level memory has been updated (training plus any
 * advancing forecasts). Returns 0 on NULL.
 *
 * # Safety
 * `runner` must be NULL or a live runner pointer.
 */
uint64_t mc_runner_memory_updates(const struct McRunner *runner);

/**
 * Re-initializes the task-level memory to its untrained starting state.
 *
 * # Safety
 * `runner` must be a live runner pointer.
 */
enum McStatus mc_runner_reset_memory(struct McRunner *runner);

/**
 * Forecasts the next `horizon x features` values from a context window.
 *
 * `values` holds `rows x features` doubles row-major in the original
 * (denormalized) units; `epoch_seconds` holds one UTC UNIX timestamp per
 * row, uniformly spaced and increasing. `rows` must equal the context
 * length. Predictions are written denormalized to `out_pred`, whose
 * capacity `out_cap` must be at least `horizon x features`.
 *
 * With `advance_memory` set, the runner's task-level memory absorbs this
 * window and will condition subsequent forecasts; otherwise the call is
 * read-only and repeatable bit for bit.
 *
 * # Safety
 * `runner` must be a live runner pointer; `values` must point to
 * `rows * features` readable doubles; `epoch_seconds` to `rows` readable
 * i64s; `out_pred` to `out_cap` writable doubles.
 */
enum McStatus mc_runner_forecast(struct McRunner *runner,
                                 const double *values,
                                 const int64_t *epoch_seconds,
                                 uintptr_t rows,
                                 bool advance_memory,
                                 double *out_pred,
                                 uintptr_t out_cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEMCAST_H */
