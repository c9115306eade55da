#ifndef EMBSQUEEZE_H
#define EMBSQUEEZE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EmsqStatus {
  EMSQ_STATUS_OK = 0,
  EMSQ_STATUS_NULL_POINTER = 1,
  EMSQ_STATUS_INVALID_ARGUMENT = 2,
  EMSQ_STATUS_IO = 3,
  EMSQ_STATUS_FORMAT = 4,
  EMSQ_STATUS_TOKEN_OUT_OF_RANGE = 5,
  EMSQ_STATUS_BUFFER_TOO_SMALL = 6,
  EMSQ_STATUS_INTERNAL = 7,
} EmsqStatus;

// A loaded model, full precision or dequantized.
typedef struct EmsqModel EmsqModel;

typedef struct EmsqVocab EmsqVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Owned by the
// library; valid until the next failing call on this thread.
const char *emsq_last_error(void);

// Loads a model file (quantized files are dequantized).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EmsqStatus emsq_model_load(const char *path, struct EmsqModel **out);

// # Safety
// `model` must come from [`emsq_model_load`] and not be freed twice.
void emsq_model_free(struct EmsqModel *model);

// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum EmsqStatus emsq_model_num_classes(const struct EmsqModel *model, size_t *out);

// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum EmsqStatus emsq_model_vocab_size(const struct EmsqModel *model, size_t *out);

// Class probabilities for one token sequence; `out` must hold
// `num_classes` values.
//
// # Safety
// `tokens` must point to `len` values and `out` to `out_len` writable values.
enum EmsqStatus emsq_model_probabilities(const struct EmsqModel *model,
                                         const size_t *tokens,
                                         size_t len,
                                         double *out,
                                         size_t out_len);

// Most probable class (lowest index on ties).
//
// # Safety
// `tokens` must point to `len` values and `out_class` be a valid pointer.
enum EmsqStatus emsq_model_predict(const struct EmsqModel *model,
                                   const size_t *tokens,
                                   size_t len,
                                   size_t *out_class);

// Loads a `vocab.txt` written next to a model.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EmsqStatus emsq_vocab_load(const char *path, struct EmsqVocab **out);

// # Safety
// `vocab` must come from [`emsq_vocab_load`] and not be freed twice.
void emsq_vocab_free(struct EmsqVocab *vocab);

// Tokenizes `text` and writes ids to `out_ids`. `out_len` always receives
// the id count; if it exceeds `capacity` nothing is written and
// `BufferTooSmall` is returned.
//
// # Safety
// `text` must be NUL-terminated, `out_ids` must hold `capacity` values
// (it may be null when `capacity` is 0), and `out_len` must be valid.
enum EmsqStatus emsq_vocab_encode(const struct EmsqVocab *vocab,
                                  const char *text,
                                  size_t *out_ids,
                                  size_t capacity,
                                  size_t *out_len);

// Rank kept when a `m x n` table retains fraction `p`.
//
// # Safety
// `out_k` must be a valid pointer.
enum EmsqStatus emsq_choose_rank(double p, size_t m, size_t n, size_t *out_k);

// `(2m - 1) n`; 0 when a dimension is 0.
uint64_t emsq_flops_dense(uint64_t m, uint64_t n);

// `2(m + n) k - (n + k)`; 0 when a dimension is 0.
uint64_t emsq_flops_factorized(uint64_t m, uint64_t n, uint64_t k);

// Triangular cyclical learning rate at `iteration`.
double emsq_clr(uint64_t iteration, uint64_t step_size, double lr_lb, double lr_ub);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMBSQUEEZE_H */
