#ifndef CCAN_H
#define CCAN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. 1 to 3 match the `ccan` command's exit codes.
 */
typedef enum CcanStatus {
  CCAN_STATUS_OK = 0,
  CCAN_STATUS_CONFIG_ERROR = 1,
  CCAN_STATUS_DATA_ERROR = 2,
  CCAN_STATUS_RUNTIME_ERROR = 3,
  CCAN_STATUS_NULL_POINTER = 4,
  CCAN_STATUS_PANIC = 5,
} CcanStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct CcanModel CcanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *ccan_version(void);

/**
 * Message of the last failed call on this thread, or NULL.
 */
const char *ccan_last_error(void);

/**
 * Loads a checkpoint file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CcanStatus ccan_model_load(const char *path, struct CcanModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`ccan_model_load`] and not be used afterwards.
 */
void ccan_model_free(struct CcanModel *model);

/**
 * Vocabulary size (reserved symbols included).
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum CcanStatus ccan_model_vocab_size(const struct CcanModel *model, size_t *out);

/**
 * Translates one whitespace-tokenized sentence. Mask-predict models run
 * `iterations` refinement steps; autoregressive models decode greedily and
 * ignore it. The result is written to `*out`.
 *
 * # Safety
 * `model` must be a live handle, `src` a NUL-terminated string and `out` a
 * valid pointer.
 */
enum CcanStatus ccan_translate(const struct CcanModel *model,
                               const char *src,
                               uint32_t iterations,
                               char **out);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void ccan_string_free(char *s);

/**
 * Mean base-2 row entropy of a row-major `rows x cols` attention matrix.
 * Rows are renormalized before the entropy.
 *
 * # Safety
 * `probs` must point to `rows * cols` doubles and `out` be valid.
 */
enum CcanStatus ccan_locality_entropy(const double *probs, size_t rows, size_t cols, double *out);

/**
 * Corpus BLEU-4 (0 to 100) of `n` whitespace-tokenized hypothesis /
 * reference pairs.
 *
 * # Safety
 * `hyps` and `refs` must each point to `n` NUL-terminated strings and
 * `out` be valid.
 */
enum CcanStatus ccan_corpus_bleu(const char *const *hyps,
                                 const char *const *refs,
                                 size_t n,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCAN_H */
