#ifndef SCTM_H
#define SCTM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SctmStatus {
  SCTM_STATUS_OK = 0,
  SCTM_STATUS_NULL_POINTER = 1,
  SCTM_STATUS_DOMAIN = 2,
  SCTM_STATUS_PARAMETER = 3,
  SCTM_STATUS_CONFIG = 4,
  SCTM_STATUS_NON_CONVERGENCE = 5,
  SCTM_STATUS_GRID_COVERAGE = 6,
  SCTM_STATUS_SIMULATION = 7,
  SCTM_STATUS_IO = 8,
  // Output buffer shorter than required.
  SCTM_STATUS_BUFFER_TOO_SMALL = 9,
  // Sample below the minimum size; nothing was computed.
  SCTM_STATUS_SKIPPED = 10,
  SCTM_STATUS_PANIC = 99,
} SctmStatus;

// Opaque single-class segment model.
typedef struct SctmModel SctmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length, or 0 if none.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t sctm_last_error(char *buf, size_t len);

// Builds a segment of `cells` equal cells with a triangular diagram,
// arrival bound `lambda` and departure bound `nu` (km, h, veh).
//
// # Safety
// `out` must be null or a valid pointer to a handle slot.
enum SctmStatus sctm_segment_new(size_t cells,
                                 double cell_length_km,
                                 double v_f,
                                 double w,
                                 double rho_max,
                                 double q_max,
                                 double lambda,
                                 double nu,
                                 struct SctmModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`sctm_segment_new`] and not be used afterwards.
void sctm_model_free(struct SctmModel *model);

// State dimension (cells × classes), or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t sctm_model_dim(const struct SctmModel *model);

// Stationary mean (`dim` entries) and covariance (`dim²`, row-major).
//
// # Safety
// `mu` and `v` must be valid for `mu_len` and `v_len` doubles.
enum SctmStatus sctm_stationary(const struct SctmModel *model,
                                double *mu,
                                size_t mu_len,
                                double *v,
                                size_t v_len);

// Mean and standard deviation (s) of the time to cross the whole segment,
// starting from the stationary mean with covariance `diag(μ)/divisor`.
//
// # Safety
// `mean` and `std` must be valid pointers.
enum SctmStatus sctm_travel_time(const struct SctmModel *model,
                                 double divisor,
                                 double grid_max_s,
                                 size_t grid_points,
                                 double *mean,
                                 double *std);

// Mean simulated throughput (veh/h) over `replications` runs of `horizon_h`
// hours after `warmup_h` hours, starting empty.
//
// # Safety
// `out` must be a valid pointer.
enum SctmStatus sctm_simulated_throughput(const struct SctmModel *model,
                                          double horizon_h,
                                          double warmup_h,
                                          uint64_t seed,
                                          size_t replications,
                                          double *out);

// Equiprobable-bin χ² normality test of `n` values.
//
// # Safety
// `values` must be valid for `n` doubles; outputs must be valid pointers.
enum SctmStatus sctm_chi2_normality(const double *values,
                                    size_t n,
                                    double *statistic,
                                    double *p_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCTM_H */
