#ifndef AMLPF_H
#define AMLPF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum AmlpfStatus {
  AMLPF_STATUS_OK = 0,
  AMLPF_STATUS_NULL_POINTER = 1,
  AMLPF_STATUS_INVALID_ARGUMENT = 2,
  AMLPF_STATUS_BUFFER_TOO_SMALL = 3,
  AMLPF_STATUS_DIMENSION_MISMATCH = 4,
  AMLPF_STATUS_FILTER_COLLAPSE = 5,
  AMLPF_STATUS_NUMERICAL_FAILURE = 6,
  AMLPF_STATUS_PANIC = 7,
} AmlpfStatus;

/**
 * Opaque state-space model.
 */
typedef struct AmlpfModel AmlpfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *amlpf_last_error(void);

/**
 * Creates a builtin model: `gbm`, `clark_cameron` (or `cc`), `nlm` or
 * `linear_gaussian`, with default parameters.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a writable pointer.
 */
enum AmlpfStatus amlpf_model_new(const char *name, struct AmlpfModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`amlpf_model_new`] and not be freed twice.
 */
void amlpf_model_free(struct AmlpfModel *model);

/**
 * State dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t amlpf_model_dim(const struct AmlpfModel *model);

/**
 * Observation dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t amlpf_model_obs_dim(const struct AmlpfModel *model);

/**
 * Simulates `horizon` observations into `obs_out` (`horizon * obs_dim`
 * doubles). Transitions are exact where the model allows it, otherwise
 * Milstein at level `fidelity`.
 *
 * # Safety
 * `model` must be a live handle and `obs_out` must hold `obs_len` doubles.
 */
enum AmlpfStatus amlpf_simulate(const struct AmlpfModel *model,
                                uintptr_t horizon,
                                uint32_t fidelity,
                                uint64_t seed,
                                double *obs_out,
                                uintptr_t obs_len);

/**
 * Bootstrap particle filter at one level with adaptive resampling at ESS/2.
 * Writes filter means of every coordinate (`horizon * dim`), the log
 * normalizing constant per time (`horizon`) and the substep cost.
 *
 * # Safety
 * `obs` must hold `horizon * obs_dim` doubles; `means_out` and `log_nc_out`
 * must hold `horizon * dim` and `horizon` doubles; `cost_out` may be null.
 */
enum AmlpfStatus amlpf_run_pf(const struct AmlpfModel *model,
                              const double *obs,
                              uintptr_t horizon,
                              uint32_t lvl,
                              uintptr_t particles,
                              uint64_t seed,
                              double *means_out,
                              double *log_nc_out,
                              uint64_t *cost_out);

/**
 * Antithetic multilevel particle filter on levels `l_min..=l_max` with the
 * default allocation for `epsilon`. The multilevel normalizing constant can
 * be negative, so it is returned as `sign * exp(log_abs)` per time.
 *
 * # Safety
 * As [`amlpf_run_pf`]; `nc_sign_out` must hold `horizon` bytes.
 */
enum AmlpfStatus amlpf_run_amlpf(const struct AmlpfModel *model,
                                 const double *obs,
                                 uintptr_t horizon,
                                 uint32_t l_min,
                                 uint32_t l_max,
                                 double epsilon,
                                 uint64_t seed,
                                 double *means_out,
                                 double *nc_log_abs_out,
                                 int8_t *nc_sign_out,
                                 uint64_t *cost_out);

/**
 * Particle counts per level for accuracy `epsilon`, written to
 * `counts_out[0..=l_max-l_min]`.
 *
 * # Safety
 * `counts_out` must hold `counts_len` elements.
 */
enum AmlpfStatus amlpf_allocate_levels(double epsilon,
                                       uint32_t l_min,
                                       uint32_t l_max,
                                       double c0,
                                       double c1,
                                       uintptr_t *counts_out,
                                       uintptr_t counts_len);

/**
 * Least-squares slope of log10 MSE against log10 cost, and its standard
 * error. Needs at least three points.
 *
 * # Safety
 * `costs` and `mses` must hold `n` doubles; outputs must be writable.
 */
enum AmlpfStatus amlpf_fit_rate(const double *costs,
                                const double *mses,
                                uintptr_t n,
                                double *slope_out,
                                double *se_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMLPF_H */
