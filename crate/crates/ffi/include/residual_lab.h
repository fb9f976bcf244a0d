#ifndef RESIDUAL_LAB_H
#define RESIDUAL_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RlStatus {
  RL_STATUS_OK = 0,
  RL_STATUS_NULL_POINTER = 1,
  RL_STATUS_INVALID_ARGUMENT = 2,
  RL_STATUS_SHAPE = 3,
  RL_STATUS_NUMERIC = 4,
  /**
   * Backward or gradient query without a matching earlier pass.
   */
  RL_STATUS_OUT_OF_ORDER = 5,
  RL_STATUS_PANIC = 6,
} RlStatus;

/**
 * Values accepted by the `variant` parameters.
 */
typedef enum RlVariant {
  RL_VARIANT_POST_LN = 0,
  RL_VARIANT_PRE_LN = 1,
  RL_VARIANT_RESIDUAL = 2,
} RlVariant;

typedef struct RlAdam RlAdam;

/**
 * A network together with its most recent forward trace and gradients.
 */
typedef struct RlNetwork RlNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Analysis-initialized network (zero query weights, alternating attention
 * and linear feed-forward blocks). `variant` takes an [`RlVariant`] value.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum RlStatus rl_network_new(int32_t variant_id,
                             size_t depth,
                             size_t width,
                             size_t seq_len,
                             uint64_t seed,
                             struct RlNetwork **out);

/**
 * Network from a JSON config with the keys `variant`, `depth`, `width`,
 * `seq_len`, `hidden`, `blocks` (one kind per block), `init`, `ln_mode`,
 * `seed`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum RlStatus rl_network_from_json(const char *json, struct RlNetwork **out);

/**
 * # Safety
 * `net` must be null or a handle from this library not yet freed.
 */
void rl_network_free(struct RlNetwork *net);

/**
 * Number of blocks; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t rl_network_depth(const struct RlNetwork *net);

/**
 * Width `d`; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t rl_network_width(const struct RlNetwork *net);

/**
 * Runs `x` (`rows × width`, `len = rows·width`) through the network and
 * writes `y` (same length). Keeps the trace for [`rl_network_backward`].
 *
 * # Safety
 * `x` and `y` must hold `len` and `y_len` doubles.
 */
enum RlStatus rl_network_forward(struct RlNetwork *net,
                                 const double *x,
                                 size_t len,
                                 double *y,
                                 size_t y_len);

/**
 * Backpropagates `dy = ∂L/∂y` through the last forward pass and writes the
 * per-block Frobenius norms of the weight gradients (`n = depth`). For
 * ResiDual, `post_norms` / `dual_norms` receive the two path components;
 * either may be null. For other wirings they must be null.
 *
 * # Safety
 * Non-null buffers must hold `len` / `n` doubles.
 */
enum RlStatus rl_network_backward(struct RlNetwork *net,
                                  const double *dy,
                                  size_t len,
                                  double *total_norms,
                                  double *post_norms,
                                  double *dual_norms,
                                  size_t n);

/**
 * Copies `∂L/∂x` from the last backward pass.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum RlStatus rl_network_input_grad(struct RlNetwork *net, double *out, size_t len);

/**
 * Fresh Adam state for `len` coordinates.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum RlStatus rl_adam_new(size_t len,
                          double alpha,
                          double beta1,
                          double beta2,
                          double eps,
                          struct RlAdam **out);

/**
 * # Safety
 * `adam` must be null or a handle from this library not yet freed.
 */
void rl_adam_free(struct RlAdam *adam);

/**
 * Advances the moments with `g` and writes the update `u` (apply as
 * `w -= u`).
 *
 * # Safety
 * `g` and `u` must hold `len` doubles.
 */
enum RlStatus rl_adam_update(struct RlAdam *adam, const double *g, double *u, size_t len);

/**
 * Condition number of the next update evaluated at `g`, without advancing
 * the state.
 *
 * # Safety
 * `g` must hold `len` doubles; `kappa` must be writable.
 */
enum RlStatus rl_adam_kappa(const struct RlAdam *adam, const double *g, size_t len, double *kappa);

/**
 * Closed-form gradient-norm estimate for blocks `1..=depth` (`n = depth`).
 *
 * # Safety
 * `out` must hold `n` doubles.
 */
enum RlStatus rl_theory_curve(int32_t variant_id, size_t depth, double *out, size_t n);

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to `cap − 1` bytes) and returns its full length in bytes. An empty
 * message means the last call succeeded.
 *
 * # Safety
 * `buf` must be null or hold `cap` bytes.
 */
size_t rl_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rl_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESIDUAL_LAB_H */
