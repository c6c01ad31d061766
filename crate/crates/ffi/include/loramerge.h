#ifndef LORAMERGE_H
#define LORAMERGE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values match the library's error codes.
 */
enum LmStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  LM_STATUS_OK = 0,
  LM_STATUS_NULL_POINTER = 1,
  LM_STATUS_NON_FINITE = 2,
  LM_STATUS_SHAPE = 3,
  LM_STATUS_ZERO_SPECTRUM = 4,
  LM_STATUS_UNDEFINED_MISALIGNMENT = 5,
  LM_STATUS_OFF_SIMPLEX = 6,
  LM_STATUS_INVALID_DISTRIBUTION = 7,
  LM_STATUS_INVALID = 8,
  LM_STATUS_DIVERGENCE = 9,
  LM_STATUS_BAD_MAGIC = 10,
  LM_STATUS_TRUNCATED = 11,
  LM_STATUS_PAYLOAD_SIZE_MISMATCH = 12,
  LM_STATUS_DUPLICATE_KEY = 13,
  LM_STATUS_BAD_HEADER = 14,
  LM_STATUS_INCONSISTENT_TASKS = 15,
  LM_STATUS_IO = 20,
  LM_STATUS_JSON = 21,
  LM_STATUS_CSV = 22,
  LM_STATUS_UTF8 = 30,
  LM_STATUS_OUT_OF_RANGE = 31,
  LM_STATUS_PANIC = 99,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum LmStatus LmStatus;
#else
typedef int32_t LmStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * A loaded adapter collection.
 */
typedef struct LmCollection LmCollection;

/**
 * The result of a merge: one dense weight matrix per layer.
 */
typedef struct LmMerged LmMerged;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *lm_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lm_version(void);

/**
 * Loads an LMK1 container from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
LmStatus lm_collection_load(const char *path, LmCollection **out);

/**
 * Parses an LMK1 container from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
LmStatus lm_collection_from_bytes(const uint8_t *data, size_t len, LmCollection **out);

/**
 * Number of tasks, or 0 for a null handle.
 *
 * # Safety
 * `c` must be null or a live handle.
 */
size_t lm_collection_num_tasks(const LmCollection *c);

/**
 * Number of layers, or 0 for a null handle.
 *
 * # Safety
 * `c` must be null or a live handle.
 */
size_t lm_collection_num_layers(const LmCollection *c);

/**
 * # Safety
 * `c` must be null or a handle not yet freed.
 */
void lm_collection_free(LmCollection *c);

/**
 * Merges every task in `c`. `config_json` is a merge configuration such as
 * `{"method": "ties", "lambda": 1.0}`; omitted parameters take their defaults.
 *
 * # Safety
 * `c` must be a live handle, `config_json` NUL-terminated, `out` writable.
 */
LmStatus lm_merge(const LmCollection *c, const char *config_json, LmMerged **out);

/**
 * Number of layers in a merge result, or 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t lm_merged_num_layers(const LmMerged *m);

/**
 * Shape of layer `layer`.
 *
 * # Safety
 * `m` must be a live handle; `rows` and `cols` writable.
 */
LmStatus lm_merged_shape(const LmMerged *m, size_t layer, size_t *rows, size_t *cols);

/**
 * Row-major weights of layer `layer`; `*data` borrows from `m` and is valid
 * until `m` is freed.
 *
 * # Safety
 * `m` must be a live handle; `data` and `len` writable.
 */
LmStatus lm_merged_data(const LmMerged *m, size_t layer, const double **data, size_t *len);

/**
 * The merge configuration with defaults filled in, as JSON. Borrowed from
 * `m`; null for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
const char *lm_merged_config_json(const LmMerged *m);

/**
 * Writes the merged weights as a zero-task LMK1 container (f32 payload).
 *
 * # Safety
 * `m` must be a live handle; `path` NUL-terminated.
 */
LmStatus lm_merged_save(const LmMerged *m, const char *path);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void lm_merged_free(LmMerged *m);

/**
 * Effective rank `exp(H(p))`, `p_i = σ_i² / Σσ²`, of a singular-value list.
 *
 * # Safety
 * `sigma` must point to `len` readable doubles; `out` writable.
 */
LmStatus lm_effective_rank(const double *sigma, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LORAMERGE_H */
