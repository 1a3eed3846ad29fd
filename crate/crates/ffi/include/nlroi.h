#ifndef NLROI_H
#define NLROI_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// `NlroiConfig::scaling`: divide scores by `√D_f`.
#define NLROI_SCALING_PER_CHANNEL 0

// `NlroiConfig::scaling`: divide scores by `√(D_f·H·W)`.
#define NLROI_SCALING_FULL_FLATTEN 1

// `NlroiConfig::diagonal_mask`: self weight is exactly zero.
#define NLROI_MASK_EXCLUDE 0

// `NlroiConfig::diagonal_mask`: diagonal score replaced by 0 (debug).
#define NLROI_MASK_ZERO_SCORE 1

typedef enum NlroiStatus {
  NLROI_STATUS_OK = 0,
  NLROI_STATUS_NULL_POINTER = 1,
  NLROI_STATUS_INVALID_ARGUMENT = 2,
  NLROI_STATUS_DIMENSION = 3,
  NLROI_STATUS_DEGENERATE_ATTENTION = 4,
  NLROI_STATUS_NUMERICAL = 5,
  NLROI_STATUS_CONFIG = 6,
  NLROI_STATUS_FORMAT = 7,
  NLROI_STATUS_CORRUPTION = 8,
  NLROI_STATUS_IO = 9,
  NLROI_STATUS_INTERNAL = 10,
} NlroiStatus;

// Intermediates of one forward pass, consumed by the backward pass.
typedef struct NlroiCache NlroiCache;

// Gradients of one backward pass.
typedef struct NlroiGrads NlroiGrads;

// Configuration plus learnable parameters.
typedef struct NlroiOperator NlroiOperator;

// Operator hyperparameters, mirroring the Rust `NlRoiConfig`.
typedef struct NlroiConfig {
  size_t d;
  size_t d_f;
  size_t d_mid;
  size_t d_g;
  size_t h;
  size_t w;
  bool attend_to_self;
  // One of the `NLROI_SCALING_*` values.
  uint32_t scaling;
  // One of the `NLROI_MASK_*` values.
  uint32_t diagonal_mask;
} NlroiConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *nlroi_last_error_message(void);

// Default configuration for `d` input channels and an `h`×`w` grid.
struct NlroiConfig nlroi_config_default(size_t d, size_t h, size_t w);

// Creates an operator with freshly initialized parameters.
//
// # Safety
// `config` must point to a valid config and `out` to writable storage.
enum NlroiStatus nlroi_operator_new(const struct NlroiConfig *config,
                                    uint64_t seed,
                                    struct NlroiOperator **out);

// # Safety
// `op` must come from this library and not be used afterwards; null is ignored.
void nlroi_operator_free(struct NlroiOperator *op);

// # Safety
// `op` must be a live operator handle and `out` writable.
enum NlroiStatus nlroi_operator_config(const struct NlroiOperator *op, struct NlroiConfig *out);

// Number of `double`s in the output for `n` RoIs: `n·(D+D_g)·H·W`.
//
// # Safety
// `op` must be a live operator handle or null (which yields 0).
size_t nlroi_operator_output_len(const struct NlroiOperator *op, size_t n);

// Forward pass over `n` RoIs. `x` holds `n·D·H·W` values and `out` has
// room for `out_len` values. When `cache_out` is non-null a cache handle for
// [`nlroi_operator_backward`] is stored there.
//
// # Safety
// All pointers must be valid for the stated lengths.
enum NlroiStatus nlroi_operator_forward(const struct NlroiOperator *op,
                                        const double *x,
                                        size_t x_len,
                                        size_t n,
                                        double *out,
                                        size_t out_len,
                                        struct NlroiCache **cache_out);

// Loop-level reference implementation with the same contract as the forward pass.
//
// # Safety
// All pointers must be valid for the stated lengths.
enum NlroiStatus nlroi_operator_reference(const struct NlroiOperator *op,
                                          const double *x,
                                          size_t x_len,
                                          size_t n,
                                          double *out,
                                          size_t out_len);

// # Safety
// `cache` must come from this library and not be used afterwards; null is ignored.
void nlroi_cache_free(struct NlroiCache *cache);

// Backward pass for the upstream gradient `d_out` (same layout as the
// forward output).
//
// # Safety
// `op` and `cache` must be live handles, `d_out` valid for `d_out_len`
// values and `grads_out` writable.
enum NlroiStatus nlroi_operator_backward(const struct NlroiOperator *op,
                                         const struct NlroiCache *cache,
                                         const double *d_out,
                                         size_t d_out_len,
                                         struct NlroiGrads **grads_out);

// # Safety
// `grads` must come from this library and not be used afterwards; null is ignored.
void nlroi_grads_free(struct NlroiGrads *grads);

// Copies the input gradient (`n·D·H·W` values).
//
// # Safety
// `grads` must be live and `dst` valid for `len` values.
enum NlroiStatus nlroi_grads_input(const struct NlroiGrads *grads, double *dst, size_t len);

// Copies the gradient of the parameter `name` (`w_phi`, `b_phi`, `w_psi`,
// `b_psi`, `w_g1`, `b_g1`, `w_g2`, `b_g2`).
//
// # Safety
// `grads` must be live, `name` a NUL-terminated string and `dst` valid for `len` values.
enum NlroiStatus nlroi_grads_param(const struct NlroiGrads *grads,
                                   const char *name,
                                   double *dst,
                                   size_t len);

// Stores the element count of parameter `name` in `len_out`.
//
// # Safety
// `op` must be live, `name` NUL-terminated and `len_out` writable.
enum NlroiStatus nlroi_operator_param_len(const struct NlroiOperator *op,
                                          const char *name,
                                          size_t *len_out);

// Copies parameter `name` into `dst`.
//
// # Safety
// `op` must be live, `name` NUL-terminated and `dst` valid for `len` values.
enum NlroiStatus nlroi_operator_get_param(const struct NlroiOperator *op,
                                          const char *name,
                                          double *dst,
                                          size_t len);

// Overwrites parameter `name` with `len` values from `src`.
//
// # Safety
// `op` must be live, `name` NUL-terminated and `src` valid for `len` values.
enum NlroiStatus nlroi_operator_set_param(struct NlroiOperator *op,
                                          const char *name,
                                          const double *src,
                                          size_t len);

// Writes the parameters as a weights file.
//
// # Safety
// `op` must be live and `path` NUL-terminated.
enum NlroiStatus nlroi_operator_save(const struct NlroiOperator *op, const char *path);

// Creates an operator for `config` with parameters read from `path`.
// Tensors other than the eight operator parameters are ignored.
//
// # Safety
// `config` must be valid, `path` NUL-terminated and `out` writable.
enum NlroiStatus nlroi_operator_load(const struct NlroiConfig *config,
                                     const char *path,
                                     struct NlroiOperator **out);

// Static name of a status code, e.g. `"NLROI_STATUS_DIMENSION"`, or
// `"NLROI_STATUS_UNKNOWN"` for values outside the enum.
const char *nlroi_status_name(int32_t status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NLROI_H */
