#ifndef RANKLOSS_H
#define RANKLOSS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  RL_STATUS_OK = 0,
  RL_STATUS_NULL_POINTER = 1,
  RL_STATUS_INVALID_INPUT = 2,
  RL_STATUS_INVALID_RANK = 3,
  RL_STATUS_IO = 4,
  RL_STATUS_FORMAT = 5,
  RL_STATUS_CONVERGENCE = 6,
  RL_STATUS_STATE = 7,
  RL_STATUS_CALIBRATION = 8,
  RL_STATUS_PANIC = 9,
} RlStatus;

/**
 * A labelled or regression dataset.
 */
typedef struct RlDataset RlDataset;

/**
 * A feed-forward network.
 */
typedef struct RlNetwork RlNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * successful call. Valid until the next call on the same thread.
 */
const char *rl_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *rl_version(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void rl_string_free(char *s);

/**
 * Load a model JSON file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out_net` a valid pointer.
 */
RlStatus rl_network_load(const char *path, RlNetwork **out_net);

/**
 * Parse a model from JSON text.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out_net` a valid pointer.
 */
RlStatus rl_network_from_json(const char *json, RlNetwork **out_net);

/**
 * Serialize a model to JSON; free the result with [`rl_string_free`].
 *
 * # Safety
 * `net` must be a live handle and `out_json` a valid pointer.
 */
RlStatus rl_network_to_json(const RlNetwork *net, char **out_json);

/**
 * Number of layers and stored weight parameters (biases excluded).
 *
 * # Safety
 * `net` must be a live handle; either out pointer may be null.
 */
RlStatus rl_network_shape(const RlNetwork *net, size_t *out_layers, size_t *out_params);

/**
 * Release a network handle. Null is ignored.
 *
 * # Safety
 * `net` must come from this library and not have been freed.
 */
void rl_network_free(RlNetwork *net);

/**
 * Load a dataset CSV file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out_data` a valid pointer.
 */
RlStatus rl_dataset_load(const char *path, RlDataset **out_data);

/**
 * Number of samples in a dataset.
 *
 * # Safety
 * `data` must be a live handle.
 */
size_t rl_dataset_len(const RlDataset *data);

/**
 * Release a dataset handle. Null is ignored.
 *
 * # Safety
 * `data` must come from this library and not have been freed.
 */
void rl_dataset_free(RlDataset *data);

/**
 * Mean loss and top-1 accuracy. Accuracy is NaN for regression data.
 *
 * # Safety
 * Handles must be live; either out pointer may be null.
 */
RlStatus rl_evaluate(const RlNetwork *net,
                     const RlDataset *data,
                     double *out_loss,
                     double *out_top1);

/**
 * Compress `net` against calibration `data`.
 *
 * `config_json` holds a compression config object; null means defaults.
 * On success a new network handle and the report JSON are returned; the
 * input network is left untouched.
 *
 * # Safety
 * Handles must be live, `config_json` null or nul-terminated, and the
 * out pointers valid. `out_report` may be null.
 */
RlStatus rl_compress(const RlNetwork *net,
                     const RlDataset *data,
                     const char *config_json,
                     RlNetwork **out_net,
                     char **out_report);

/**
 * Largest rank `k` with `k (rows + cols) < rows cols`; 0 if none.
 */
size_t rl_max_compressive_rank(size_t rows, size_t cols);

/**
 * Rank-`rank` truncated SVD of a row-major `rows × cols` matrix.
 *
 * Writes `l` (`rows × rank`, singular values folded in) and `r`
 * (`cols × rank`), both row-major, so the approximation is `l rᵀ`.
 *
 * # Safety
 * `weights` must point to `rows * cols` values, `out_l` to room for
 * `rows * rank` and `out_r` to room for `cols * rank`.
 */
RlStatus rl_factorize(const double *weights,
                      size_t rows,
                      size_t cols,
                      size_t rank,
                      double *out_l,
                      double *out_r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANKLOSS_H */
