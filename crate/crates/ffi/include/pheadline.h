#ifndef PHEADLINE_H
#define PHEADLINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PhStatus {
  PH_STATUS_OK = 0,
  PH_STATUS_NULL_POINTER = 1,
  PH_STATUS_INVALID_UTF8 = 2,
  PH_STATUS_IO = 3,
  PH_STATUS_PARSE = 4,
  PH_STATUS_CHECKPOINT = 5,
  PH_STATUS_INVALID_INPUT = 6,
  PH_STATUS_UNDEFINED_METRIC = 7,
  PH_STATUS_PANIC = 8,
} PhStatus;

/**
 * A loaded checkpoint.
 */
typedef struct PhModel PhModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint written by `pheadline train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PhStatus ph_model_load(const char *path, struct PhModel **out);

/**
 * # Safety
 * `model` must come from [`ph_model_load`] and not be freed twice. Null is ignored.
 */
void ph_model_free(struct PhModel *model);

/**
 * Greedy headline for one JSON record (the dataset line format).
 *
 * # Safety
 * `model` must be a live model, `record_json` a NUL-terminated string and
 * `out` a valid pointer. The result must be freed with [`ph_string_free`].
 */
enum PhStatus ph_generate(const struct PhModel *model, const char *record_json, char **out);

/**
 * # Safety
 * `s` must come from this library and not be freed twice. Null is ignored.
 */
void ph_string_free(char *s);

/**
 * ROUGE-N F1 in [0, 100] over lowercased word tokens.
 *
 * # Safety
 * `gen` and `reference` must be NUL-terminated strings, `out` a valid pointer.
 */
enum PhStatus ph_rouge_n(const char *gen, const char *reference, unsigned int n, double *out);

/**
 * ROUGE-L F1 in [0, 100].
 *
 * # Safety
 * As for [`ph_rouge_n`].
 */
enum PhStatus ph_rouge_l(const char *gen, const char *reference, double *out);

/**
 * Share of headline segments supported by the body, in [0, 100], with the
 * default threshold and window.
 *
 * # Safety
 * `gen` and `body` must be NUL-terminated strings, `out` a valid pointer.
 */
enum PhStatus ph_factcc_proxy(const char *gen, const char *body, double *out);

/**
 * Personalization consistency of `gen` against `n_history` headlines.
 *
 * # Safety
 * `history` must point to `n_history` NUL-terminated strings; the output
 * pointers must be valid.
 */
enum PhStatus ph_pc_scores(const char *gen,
                           const char *const *history,
                           size_t n_history,
                           double *out_avg,
                           double *out_max);

/**
 * Generates for every record of a JSONL dataset and returns the metrics
 * report as a JSON object.
 *
 * # Safety
 * `model` must be a live model, `dataset_path` a NUL-terminated string and
 * `out` a valid pointer. The result must be freed with [`ph_string_free`].
 */
enum PhStatus ph_evaluate(const struct PhModel *model, const char *dataset_path, char **out);

/**
 * Message for the last failed call on this thread, or an empty string.
 * Valid until the next call into this library on the same thread.
 */
const char *ph_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHEADLINE_H */
