#ifndef QLOWER_H
#define QLOWER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values 2-6 match the command-line exit codes.
 */
typedef enum QlowerStatus {
  QLOWER_STATUS_OK = 0,
  QLOWER_STATUS_INVALID_ARGUMENT = 1,
  QLOWER_STATUS_MISSING_INPUT = 2,
  QLOWER_STATUS_EMPTY_DATASET = 3,
  QLOWER_STATUS_UNCALIBRATED = 4,
  QLOWER_STATUS_NUMERIC = 5,
  QLOWER_STATUS_THRESHOLD = 6,
  /**
   * Malformed JSON or a schema violation.
   */
  QLOWER_STATUS_SCHEMA = 7,
  /**
   * Output buffer too small; the required length is still reported.
   */
  QLOWER_STATUS_BUFFER_TOO_SMALL = 8,
  QLOWER_STATUS_PANIC = 9,
} QlowerStatus;

/**
 * Opaque FP32 model.
 */
typedef struct QlowerModel QlowerModel;

/**
 * Opaque lowered integer program.
 */
typedef struct QlowerProgram QlowerProgram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *qlower_last_error(void);

/**
 * Static, nul-terminated library version.
 */
const char *qlower_version(void);

/**
 * Parses a model JSON document of `len` bytes.
 */
enum QlowerStatus qlower_model_load(const uint8_t *json, size_t len, struct QlowerModel **out);

void qlower_model_free(struct QlowerModel *model);

/**
 * FP32 (or embedded fake-quant) inference; writes the first graph output.
 */
enum QlowerStatus qlower_model_infer(const struct QlowerModel *model,
                                     const float *input,
                                     const size_t *shape,
                                     size_t rank,
                                     float *out,
                                     size_t out_len,
                                     size_t *written);

/**
 * Folds, inserts quantizers for `preset`, calibrates with MinMax on one
 * batch and lowers to an integer program.
 */
enum QlowerStatus qlower_model_quantize(const struct QlowerModel *model,
                                        const char *preset,
                                        const float *calib,
                                        const size_t *shape,
                                        size_t rank,
                                        struct QlowerProgram **out);

/**
 * Parses a lowered program JSON document.
 */
enum QlowerStatus qlower_program_load(const uint8_t *json, size_t len, struct QlowerProgram **out);

/**
 * Serializes a program. The string is released with [`qlower_string_free`].
 */
enum QlowerStatus qlower_program_to_json(const struct QlowerProgram *program, char **out);

/**
 * Integer-only execution; writes the dequantized first output.
 */
enum QlowerStatus qlower_program_run(const struct QlowerProgram *program,
                                     const float *input,
                                     const size_t *shape,
                                     size_t rank,
                                     float *out,
                                     size_t out_len,
                                     size_t *written);

void qlower_program_free(struct QlowerProgram *program);

void qlower_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QLOWER_H */
