#ifndef TSINV_H
#define TSINV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TsinvStatus {
  TSINV_STATUS_OK = 0,
  TSINV_STATUS_NULL_POINTER = 1,
  TSINV_STATUS_INVALID_ARGUMENT = 2,
  TSINV_STATUS_IO = 3,
  TSINV_STATUS_SHAPE = 4,
  TSINV_STATUS_CONFIG = 5,
  TSINV_STATUS_CAPTURE_MISMATCH = 6,
  TSINV_STATUS_DATA = 7,
  TSINV_STATUS_NON_FINITE = 8,
  TSINV_STATUS_ONE_SHOT_DEGENERATE = 9,
  TSINV_STATUS_BUFFER_TOO_SMALL = 10,
  TSINV_STATUS_PANIC = 11,
} TsinvStatus;

/**
 * A shared gradient from one simulated client round, with its private batch.
 */
typedef struct TsinvCapture TsinvCapture;

/**
 * A forecasting model with its parameters.
 */
typedef struct TsinvModel TsinvModel;

/**
 * A reconstructed batch.
 */
typedef struct TsinvResult TsinvResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *tsinv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tsinv_version(void);

/**
 * Creates a freshly initialized model. `arch` is one of
 * `fcn`, `cnn`, `tcn`, `gru2fcn`, `gru2gru`.
 *
 * # Safety
 * `arch` must be a NUL-terminated string; `out` must be writable.
 */
enum TsinvStatus tsinv_model_init(const char *arch,
                                  size_t obs_len,
                                  size_t horizon,
                                  size_t hidden,
                                  uint64_t seed,
                                  struct TsinvModel **out);

/**
 * Loads a checkpoint written by `tsinv model init`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TsinvStatus tsinv_model_load(const char *path, struct TsinvModel **out);

/**
 * Saves the checkpoint to `path` (plus its JSON sidecar).
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum TsinvStatus tsinv_model_save(const struct TsinvModel *model, const char *path);

/**
 * Number of trainable parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t tsinv_model_param_count(const struct TsinvModel *model);

/**
 * # Safety
 * `model` must be null or an unfreed handle from this library.
 */
void tsinv_model_free(struct TsinvModel *model);

/**
 * Simulates a client round on a batch of `batch_size` windows.
 *
 * `obs` holds `batch_size * H` values and `tar` `batch_size * F`, row-major.
 * `defense` is `none`, `gauss`, `prune` or `sign`; `strength` is the noise
 * std or prune ratio (a negative value selects the default).
 *
 * # Safety
 * Pointers must be valid for the stated lengths; strings NUL-terminated.
 */
enum TsinvStatus tsinv_capture_new(const struct TsinvModel *model,
                                   const double *obs,
                                   const double *tar,
                                   size_t batch_size,
                                   const char *defense,
                                   double strength,
                                   uint64_t seed,
                                   struct TsinvCapture **out);

/**
 * Batch size of the capture, or 0 for a null handle.
 *
 * # Safety
 * `capture` must be null or come from this library.
 */
size_t tsinv_capture_batch_size(const struct TsinvCapture *capture);

/**
 * Copies the shared gradient into `buf`. `needed` receives its length;
 * pass a null `buf` to query the length alone.
 *
 * # Safety
 * `buf` must be null or writable for `len` values; `needed` must be writable.
 */
enum TsinvStatus tsinv_capture_gradient(const struct TsinvCapture *capture,
                                        double *buf,
                                        size_t len,
                                        size_t *needed);

/**
 * # Safety
 * `capture` must be null or an unfreed handle from this library.
 */
void tsinv_capture_free(struct TsinvCapture *capture);

/**
 * Runs an optimization attack with the method's preset and `steps` iterations.
 * `method` uses the CLI names (`dlg-adam`, `invg`, `ts-inverse`, ...).
 *
 * # Safety
 * Handles must come from this library; `method` must be NUL-terminated.
 */
enum TsinvStatus tsinv_attack_run(const struct TsinvModel *model,
                                  const struct TsinvCapture *capture,
                                  const char *method,
                                  size_t steps,
                                  uint64_t seed,
                                  struct TsinvResult **out);

/**
 * Copies the reconstructed observations (`B * H` values).
 *
 * # Safety
 * As for [`tsinv_capture_gradient`].
 */
enum TsinvStatus tsinv_result_obs(const struct TsinvResult *result,
                                  double *buf,
                                  size_t len,
                                  size_t *needed);

/**
 * Copies the reconstructed targets (`B * F` values).
 *
 * # Safety
 * As for [`tsinv_capture_gradient`].
 */
enum TsinvStatus tsinv_result_tar(const struct TsinvResult *result,
                                  double *buf,
                                  size_t len,
                                  size_t *needed);

/**
 * sMAPE of the reconstruction against the capture's private batch, without
 * permutation matching. Either output pointer may be null.
 *
 * # Safety
 * Handles must come from this library.
 */
enum TsinvStatus tsinv_result_score(const struct TsinvResult *result,
                                    const struct TsinvCapture *capture,
                                    double *smape_obs,
                                    double *smape_tar);

/**
 * # Safety
 * `result` must be null or an unfreed handle from this library.
 */
void tsinv_result_free(struct TsinvResult *result);

/**
 * Symmetric mean absolute percentage error of two length-`n` arrays.
 *
 * # Safety
 * `a` and `b` must be readable for `n` values; `out` must be writable.
 */
enum TsinvStatus tsinv_smape(const double *a, const double *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSINV_H */
