#ifndef HQP_H
#define HQP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every library call.
 */
typedef enum HqpStatus {
  HqpOk = 0,
  HqpInvalidArgument = 1,
  HqpRuntimeError = 2,
  HqpNullPointer = 3,
  HqpPanic = 4,
} HqpStatus;

/**
 * Opaque instance handle.
 */
typedef struct HqpInstanceHandle HqpInstanceHandle;

/**
 * Result block of a decode run.
 */
typedef struct HqpDecodeResult {
  uint64_t iterations;
  int32_t converged;
  double mse;
  double zero_one;
} HqpDecodeResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *hqp_last_error_message(void);

/**
 * Release a string allocated by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void hqp_string_free(char *s);

/**
 * Generate an instance. `pi` may be null for uniform proportions;
 * `exact_composition != 0` selects largest-remainder composition.
 *
 * # Safety
 * `pi` must be null or point to `d` doubles; `out` must be a valid pointer.
 */
enum HqpStatus hqp_instance_generate(uint64_t n,
                                     uint64_t d,
                                     uint64_t m,
                                     double alpha,
                                     const double *pi,
                                     uint64_t seed,
                                     int32_t exact_composition,
                                     struct HqpInstanceHandle **out);

/**
 * Parse an instance from its JSON document.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string; `out` must be valid.
 */
enum HqpStatus hqp_instance_from_json(const char *json, struct HqpInstanceHandle **out);

/**
 * Serialize an instance to its JSON document (release with
 * [`hqp_string_free`]).
 *
 * # Safety
 * `handle` must be a live handle from this library; `out_json` valid.
 */
enum HqpStatus hqp_instance_to_json(const struct HqpInstanceHandle *handle, char **out_json);

/**
 * Instance shape accessors; any output pointer may be null.
 *
 * # Safety
 * `handle` must be a live handle from this library.
 */
enum HqpStatus hqp_instance_shape(const struct HqpInstanceHandle *handle,
                                  uint64_t *out_n,
                                  uint64_t *out_d,
                                  uint64_t *out_m);

/**
 * Planted categories, written into a caller buffer of length `n`.
 *
 * # Safety
 * `out_planted` must point to `n` writable `uint32` slots.
 */
enum HqpStatus hqp_instance_planted(const struct HqpInstanceHandle *handle, uint32_t *out_planted);

/**
 * Destroy an instance handle (null is a no-op).
 *
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void hqp_instance_free(struct HqpInstanceHandle *handle);

/**
 * Decode with approximate message passing. `out_marginals` may be null or
 * point to `n * d` doubles (row-major); `out_hard` may be null or point to
 * `n` `uint32` slots.
 *
 * # Safety
 * Pointer arguments must satisfy the stated shapes.
 */
enum HqpStatus hqp_amp_decode(const struct HqpInstanceHandle *handle,
                              uint64_t max_iter,
                              double conv_tol,
                              double damping,
                              double *out_marginals,
                              uint32_t *out_hard,
                              struct HqpDecodeResult *out_result);

/**
 * Decode with the relaxed belief propagation reference (small instances).
 *
 * # Safety
 * `out_marginals` must point to `n * d` writable doubles.
 */
enum HqpStatus hqp_rbp_decode(const struct HqpInstanceHandle *handle,
                              uint64_t max_iter,
                              double conv_tol,
                              double *out_marginals);

/**
 * `kappa*_binary(p)` by one-dimensional quadrature.
 *
 * # Safety
 * Output pointers may be null when the value is not wanted.
 */
enum HqpStatus hqp_kappa_binary(double p, double *out_kappa, double *out_x_star);

/**
 * `kappa*_sym(d)` by seeded Monte Carlo.
 *
 * # Safety
 * Output pointers may be null when the value is not wanted.
 */
enum HqpStatus hqp_kappa_sym(uint64_t d,
                             uint64_t samples,
                             uint64_t replicates,
                             uint64_t seed,
                             double *out_kappa,
                             double *out_std_err);

/**
 * `kappa*_rs` for a matching edge (zero-based indices here).
 *
 * # Safety
 * `pi` must point to `d` doubles.
 */
enum HqpStatus hqp_kappa_matching(const double *pi,
                                  uint64_t d,
                                  uint64_t r,
                                  uint64_t s,
                                  double *out_kappa);

/**
 * Scalar state evolution on the binary ray: the fixed point of
 * `a <- kappa^{-1} phi(a)` from `a0`, and the implied MSE limit.
 *
 * # Safety
 * Output pointers may be null when the value is not wanted.
 */
enum HqpStatus hqp_scalar_se_binary(double p,
                                    double kappa,
                                    double a0,
                                    uint64_t max_iter,
                                    double tol,
                                    double *out_a_star,
                                    double *out_mse_limit);

/**
 * Full-matrix state evolution from the non-informative point (or from `x0`,
 * row-major `d x d`, when non-null). Writes the fixed point into
 * `out_x_star` (`d x d`, may be null) and reports the final MSE.
 *
 * # Safety
 * Buffers must satisfy the stated shapes.
 */
enum HqpStatus hqp_se_run(uint64_t d,
                          const double *pi,
                          double kappa,
                          const double *x0,
                          uint64_t samples,
                          uint64_t seed,
                          uint64_t max_iter,
                          double *out_x_star,
                          double *out_mse,
                          int32_t *out_converged);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HQP_H */
