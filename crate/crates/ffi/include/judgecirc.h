/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef JUDGECIRC_H
#define JUDGECIRC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Edge kinds in [`JcEdge`].
typedef enum JcEdgeKind {
  JC_RESIDUAL = 0,
  JC_ATTN_CROSS = 1,
} JcEdgeKind;

// Status codes returned by every fallible function.
typedef enum JcStatus {
  JC_OK = 0,
  // A required pointer argument was null.
  JC_NULL_ARGUMENT = 1,
  // Invalid configuration, argument or input.
  JC_CONFIG = 2,
  // Missing or unreadable file.
  JC_ARTIFACT = 3,
  // Numeric failure (non-finite values, degenerate pair, undefined statistic).
  JC_NUMERIC = 4,
  // A string argument was not valid UTF-8.
  JC_UTF8 = 5,
  // An output buffer was too small.
  JC_BUFFER_TOO_SMALL = 6,
  // An index past the end of a table.
  JC_OUT_OF_RANGE = 7,
  // Internal panic; the handle involved should be considered unusable.
  JC_PANIC = 8,
} JcStatus;

// Opaque compiled model.
typedef struct JcModel JcModel;

// Opaque attribution table, ranked by descending absolute score.
typedef struct JcTable JcTable;

// One attributed edge.
//
// Residual edges use `sender`, `receiver` (canonical component indices: 0 is the
// embedding, the last index the logits) and `position` (negative, right-aligned).
// Cross-token edges use `layer`, `head`, `src` and `dst`. Unused fields are -1.
typedef struct JcEdge {
  enum JcEdgeKind kind;
  int64_t sender;
  int64_t receiver;
  int64_t position;
  int64_t layer;
  int64_t head;
  int64_t src;
  int64_t dst;
  // Mean score over pairs.
  double score;
  double variance;
  // Number of pairs contributing.
  uint64_t n;
} JcEdge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none. Valid until the
// next failing call on the same thread.
const char *jc_last_error(void);

// Library version as a static NUL-terminated string.
const char *jc_version(void);

// Load a checkpoint written by `judgecirc train`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum JcStatus jc_model_load(const char *path, struct JcModel **out);

// Release a model. Null is ignored.
//
// # Safety
// `model` must come from [`jc_model_load`] and not be used afterwards.
void jc_model_free(struct JcModel *model);

// Vocabulary size, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t jc_model_vocab_size(const struct JcModel *model);

// Number of layers, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t jc_model_n_layers(const struct JcModel *model);

// Final-position logits of an unpatched forward pass. `out` receives
// `jc_model_vocab_size(model)` values.
//
// # Safety
// `tokens` must hold `n_tokens` values and `out` `out_len` writable doubles.
enum JcStatus jc_forward_logits(const struct JcModel *model,
                                const uint32_t *tokens,
                                uintptr_t n_tokens,
                                double *out,
                                uintptr_t out_len);

// Expected rating `sum_r r * P(r)` over the given rating tokens (rating 1 first).
//
// # Safety
// Pointer arguments must be valid for the given lengths.
enum JcStatus jc_expected_rating(const struct JcModel *model,
                                 const uint32_t *tokens,
                                 uintptr_t n_tokens,
                                 const uint32_t *scale,
                                 uintptr_t n_scale,
                                 double *out);

// Edge attributions for one clean/corrupted pair (equal lengths), with the expected
// rating over `scale` as the metric. `lrp` selects the default relevance rules instead
// of exact gradients. No gap filter is applied.
//
// # Safety
// Pointer arguments must be valid for the given lengths; `out` must be writable.
enum JcStatus jc_trace_pair(const struct JcModel *model,
                            const uint32_t *clean,
                            const uint32_t *corrupt,
                            uintptr_t n_tokens,
                            const uint32_t *scale,
                            uintptr_t n_scale,
                            bool lrp,
                            struct JcTable **out);

// Number of edges in a table (0 for null).
//
// # Safety
// `table` must be null or a live handle.
uintptr_t jc_table_len(const struct JcTable *table);

// The `rank`-th edge by descending absolute score.
//
// # Safety
// `table` must be a live handle and `out` writable.
enum JcStatus jc_table_get(const struct JcTable *table, uintptr_t rank, struct JcEdge *out);

// Write the table as CSV (the same format `judgecirc trace` emits).
//
// # Safety
// `table` must be a live handle and `path` a NUL-terminated string.
enum JcStatus jc_table_write_csv(const struct JcTable *table, const char *path);

// Release a table. Null is ignored.
//
// # Safety
// `table` must come from [`jc_trace_pair`] and not be used afterwards.
void jc_table_free(struct JcTable *table);

// Run the command-line tool in-process; returns its exit code. `argv[0]` is the
// program name.
//
// # Safety
// `argv` must hold `argc` NUL-terminated strings.
int32_t jc_cli_main(uintptr_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JUDGECIRC_H */
