#ifndef SIDEMOE_H
#define SIDEMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SmStatus {
  SM_STATUS_OK = 0,
  SM_STATUS_NULL_POINTER = 1,
  SM_STATUS_CONFIG = 2,
  SM_STATUS_NUMERIC = 3,
  SM_STATUS_IO = 4,
  SM_STATUS_FORMAT = 5,
  SM_STATUS_DIMENSION = 6,
  SM_STATUS_INDEX = 7,
  SM_STATUS_DIVERGENCE = 8,
  SM_STATUS_BUFFER_TOO_SMALL = 9,
  SM_STATUS_PANIC = 10,
} SmStatus;

/**
 * Rounding applied when mapping weights to grid codes.
 */
typedef enum SmRounding {
  SM_ROUNDING_FLOOR = 0,
  SM_ROUNDING_NEAREST = 1,
} SmRounding;

/**
 * Normalization of the selected routing weights.
 */
typedef enum SmPostMask {
  SM_POST_MASK_RENORMALIZE = 0,
  SM_POST_MASK_SOFTMAX = 1,
} SmPostMask;

/**
 * Run configuration handle.
 */
typedef struct SmConfig SmConfig;

/**
 * Quantized tensor handle.
 */
typedef struct SmQuantized SmQuantized;

/**
 * Finished run handle.
 */
typedef struct SmRun SmRun;

/**
 * Scale, zero point and range of a quantized tensor.
 */
typedef struct SmQuantParams {
  double scale;
  int32_t zero_point;
  uint8_t bits;
  double r_min;
  double r_max;
} SmQuantParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, NUL-terminated.
 * Writes nothing but `*needed` when `capacity` is short. Never changes
 * the stored message.
 *
 * # Safety
 * `buf` must be valid for `capacity` bytes and `needed` writable.
 */
enum SmStatus sm_last_error(char *buf, size_t capacity, size_t *needed);

/**
 * Quantize `len` weights, laid out as a vector.
 *
 * # Safety
 * `weights` must be valid for `len` reads and `out` writable.
 */
enum SmStatus sm_quantize(const double *weights,
                          size_t len,
                          uint8_t bits,
                          enum SmRounding rounding,
                          struct SmQuantized **out);

/**
 * # Safety
 * `q` must come from this library and not be used afterwards.
 */
void sm_quantized_free(struct SmQuantized *q);

/**
 * # Safety
 * `q` must be a live handle and `out` writable.
 */
enum SmStatus sm_quantized_params(const struct SmQuantized *q, struct SmQuantParams *out);

/**
 * Number of quantized elements, 0 for a null handle.
 *
 * # Safety
 * `q` must be null or a live handle.
 */
size_t sm_quantized_len(const struct SmQuantized *q);

/**
 * # Safety
 * `codes` must be valid for `capacity` writes and `needed` writable.
 */
enum SmStatus sm_quantized_codes(const struct SmQuantized *q,
                                 uint32_t *codes,
                                 size_t capacity,
                                 size_t *needed);

/**
 * # Safety
 * `values` must be valid for `capacity` writes and `needed` writable.
 */
enum SmStatus sm_quantized_dequantize(const struct SmQuantized *q,
                                      double *values,
                                      size_t capacity,
                                      size_t *needed);

/**
 * Sum of squared residuals against `original` and the largest absolute
 * residual.
 *
 * # Safety
 * `original` must be valid for `len` reads; the outputs writable.
 */
enum SmStatus sm_quantized_error(const struct SmQuantized *q,
                                 const double *original,
                                 size_t len,
                                 double *error_q,
                                 double *max_residual);

/**
 * Serialized `SMQT` blob.
 *
 * # Safety
 * `buf` must be valid for `capacity` writes and `needed` writable.
 */
enum SmStatus sm_quantized_to_blob(const struct SmQuantized *q,
                                   uint8_t *buf,
                                   size_t capacity,
                                   size_t *needed);

/**
 * # Safety
 * `blob` must be valid for `len` reads and `out` writable.
 */
enum SmStatus sm_quantized_from_blob(const uint8_t *blob, size_t len, struct SmQuantized **out);

/**
 * Combination weights for one token: average of `softmax(scores)` and
 * `correlation`, top-`k` selection, then `mode` normalization. Writes
 * `n` dense weights, zero for unselected experts.
 *
 * # Safety
 * `scores` and `correlation` must be valid for `n` reads, `weights` for
 * `n` writes.
 */
enum SmStatus sm_route(const double *scores,
                       const double *correlation,
                       size_t n,
                       size_t k,
                       enum SmPostMask mode,
                       double *weights);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be writable.
 */
enum SmStatus sm_config_default(struct SmConfig **out);

/**
 * Configuration from a NUL-terminated TOML document; unknown keys fail
 * with `SM_CONFIG`.
 *
 * # Safety
 * `toml` must be a valid C string and `out` writable.
 */
enum SmStatus sm_config_from_toml(const char *toml, struct SmConfig **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum SmStatus sm_config_set_seed(struct SmConfig *cfg, uint64_t seed);

/**
 * The configuration as TOML, NUL-terminated.
 *
 * # Safety
 * `buf` must be valid for `capacity` writes and `needed` writable.
 */
enum SmStatus sm_config_to_toml(const struct SmConfig *cfg,
                                char *buf,
                                size_t capacity,
                                size_t *needed);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards.
 */
void sm_config_free(struct SmConfig *cfg);

/**
 * Analytic memory report as JSON, NUL-terminated.
 *
 * # Safety
 * `buf` must be valid for `capacity` writes and `needed` writable.
 */
enum SmStatus sm_memory_report_json(const struct SmConfig *cfg,
                                    char *buf,
                                    size_t capacity,
                                    size_t *needed);

/**
 * Full seeded run: pretraining, quantization, fine-tuning, evaluation.
 *
 * # Safety
 * `cfg` must be a live handle and `out` writable.
 */
enum SmStatus sm_train(const struct SmConfig *cfg, struct SmRun **out);

/**
 * # Safety
 * `run` must come from this library and not be used afterwards.
 */
void sm_run_free(struct SmRun *run);

/**
 * Final validation and test accuracy.
 *
 * # Safety
 * `run` must be a live handle; outputs writable.
 */
enum SmStatus sm_run_accuracy(const struct SmRun *run, double *val, double *test);

/**
 * Per-epoch report CSV, NUL-terminated.
 *
 * # Safety
 * `buf` must be valid for `capacity` writes and `needed` writable.
 */
enum SmStatus sm_run_report_csv(const struct SmRun *run,
                                char *buf,
                                size_t capacity,
                                size_t *needed);

/**
 * Run summary JSON, NUL-terminated.
 *
 * # Safety
 * `buf` must be valid for `capacity` writes and `needed` writable.
 */
enum SmStatus sm_run_summary_json(const struct SmRun *run,
                                  char *buf,
                                  size_t capacity,
                                  size_t *needed);

/**
 * Re-quantization event log CSV, NUL-terminated.
 *
 * # Safety
 * `buf` must be valid for `capacity` writes and `needed` writable.
 */
enum SmStatus sm_run_events_csv(const struct SmRun *run,
                                char *buf,
                                size_t capacity,
                                size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIDEMOE_H */
