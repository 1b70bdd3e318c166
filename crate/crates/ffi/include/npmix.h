#ifndef NPMIX_H
#define NPMIX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum NpmixStatus {
  NPMIX_STATUS_OK = 0,
  NPMIX_STATUS_NULL_POINTER = 1,
  NPMIX_STATUS_INVALID_ARGUMENT = 2,
  NPMIX_STATUS_IO = 3,
  NPMIX_STATUS_PARSE = 4,
  NPMIX_STATUS_NUMERICAL = 5,
  NPMIX_STATUS_ESTIMATION = 6,
  NPMIX_STATUS_PANIC = 7,
} NpmixStatus;

// Opaque dataset handle.
typedef struct NpmixDataset NpmixDataset;

// Opaque mixing-distribution handle.
typedef struct NpmixMixing NpmixMixing;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next npmix call on the same thread.
const char *npmix_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void npmix_string_free(char *s);

// Bivariate normal CDF `P(Z1 <= h, Z2 <= k)` with correlation `rho`.
//
// # Safety
// `out` must be a valid pointer.
enum NpmixStatus npmix_bvn_cdf(double h, double k, double rho, double *out);

// Probit probability of alternative `j` (0-based) given systematic
// utilities `v[n_alt]` and the row-major error covariance `sigma[n_alt*n_alt]`.
//
// # Safety
// `v` and `sigma` must point to `n_alt` and `n_alt * n_alt` values.
enum NpmixStatus npmix_mnp_prob(const double *v,
                                const double *sigma,
                                uintptr_t n_alt,
                                uintptr_t j,
                                double *out);

// Simulates `n` observations of a built-in case ("1a", "1b", "1c", "2a", "2b").
//
// # Safety
// `case` must be a NUL-terminated string and `out` a valid pointer.
enum NpmixStatus npmix_dataset_simulate(const char *case_,
                                        uintptr_t n,
                                        uint64_t seed,
                                        struct NpmixDataset **out);

// Loads a dataset CSV.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum NpmixStatus npmix_dataset_load(const char *path, struct NpmixDataset **out);

// Writes a dataset CSV.
//
// # Safety
// `data` must be a live handle and `path` a NUL-terminated string.
enum NpmixStatus npmix_dataset_save(const struct NpmixDataset *data, const char *path);

// Number of observations, or 0 for a null handle.
//
// # Safety
// `data` must be null or a live handle.
uintptr_t npmix_dataset_len(const struct NpmixDataset *data);

// Releases a dataset. Null is ignored.
//
// # Safety
// `data` must be null or a live handle, not used afterwards.
void npmix_dataset_free(struct NpmixDataset *data);

// Estimates the mixing distribution with estimator `mode` ("GR", "EM",
// "EM-GR" or "BE") under the model of `case`. `config_json` may be null for
// the defaults; missing keys take their defaults. `loglik` may be null.
//
// # Safety
// Pointers must be valid; `out` receives a new handle.
enum NpmixStatus npmix_estimate(const struct NpmixDataset *data,
                                const char *case_,
                                const char *mode,
                                const char *config_json,
                                struct NpmixMixing **out,
                                double *loglik);

// Parses a mixing distribution from its JSON form.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum NpmixStatus npmix_mixing_from_json(const char *json, struct NpmixMixing **out);

// Serializes a mixing distribution to JSON; free the result with
// [`npmix_string_free`].
//
// # Safety
// `q` must be a live handle and `out` a valid pointer.
enum NpmixStatus npmix_mixing_to_json(const struct NpmixMixing *q, char **out);

// Number of mixture components, or 0 for a null handle.
//
// # Safety
// `q` must be null or a live handle.
uintptr_t npmix_mixing_len(const struct NpmixMixing *q);

// Writes the mixture mean into `out[0..cap]`; `dim` receives the dimension.
// Fails with `InvalidArgument` when `cap` is too small.
//
// # Safety
// `q` must be a live handle, `out` must hold `cap` values.
enum NpmixStatus npmix_mixing_mean(const struct NpmixMixing *q,
                                   double *out,
                                   uintptr_t cap,
                                   uintptr_t *dim);

// Releases a mixing distribution. Null is ignored.
//
// # Safety
// `q` must be null or a live handle, not used afterwards.
void npmix_mixing_free(struct NpmixMixing *q);

// Evaluation metrics of `q` against the generating mixture of `case`, as a
// JSON object; free the result with [`npmix_string_free`].
//
// # Safety
// Handles must be live and `out` a valid pointer.
enum NpmixStatus npmix_metrics_json(const struct NpmixDataset *data,
                                    const struct NpmixMixing *q,
                                    const char *case_,
                                    char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NPMIX_H */
