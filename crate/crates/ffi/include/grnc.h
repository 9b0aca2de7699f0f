#ifndef GRNC_H
#define GRNC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Use the model's configured reconstruction mode.
 */
#define GRNC_MODE_DEFAULT -1

#define GRNC_MODE_ONE_SHOT 0

#define GRNC_MODE_ADDITIVE 1

/**
 * Result codes.
 */
typedef enum GrncStatus {
  GRNC_STATUS_OK = 0,
  GRNC_STATUS_NULL_ARGUMENT = 1,
  GRNC_STATUS_INVALID_ARGUMENT = 2,
  GRNC_STATUS_IO = 3,
  GRNC_STATUS_FORMAT = 4,
  GRNC_STATUS_PANIC = 5,
} GrncStatus;

/**
 * A loaded model and the digest of the checkpoint it came from.
 */
typedef struct GrncModel GrncModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *grnc_last_error(void);

/**
 * Loads a `GRNM` checkpoint from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum GrncStatus grnc_model_from_bytes(const uint8_t *data, size_t len, struct GrncModel **out);

/**
 * Loads a `GRNM` checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GrncStatus grnc_model_load(const char *path, struct GrncModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from a load call and not be used afterwards.
 */
void grnc_model_free(struct GrncModel *model);

/**
 * Code channels of a loaded model, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t grnc_model_code_channels(const struct GrncModel *model);

/**
 * Raw rate of a stream with these parameters.
 */
double grnc_bits_per_pixel(uint32_t iterations, uint32_t code_channels);

/**
 * Compresses interleaved 8-bit RGB into a `GRNB` stream. `iterations` of 0
 * and `mode` of [`GRNC_MODE_DEFAULT`] use the model's settings.
 *
 * # Safety
 * `rgb` must point to `3·width·height` bytes; the out-pointers must be
 * writable. The stream is released with [`grnc_buffer_free`].
 */
enum GrncStatus grnc_encode_rgb(const struct GrncModel *model,
                                const uint8_t *rgb,
                                uint32_t width,
                                uint32_t height,
                                uint32_t iterations,
                                int32_t mode,
                                uint8_t **out,
                                size_t *out_len);

/**
 * Decodes the first `iterations` passes of a stream (all when 0) into
 * interleaved 8-bit RGB. With `strict` non-zero a stream from another
 * checkpoint is rejected.
 *
 * # Safety
 * `stream` must point to `len` bytes; the out-pointers must be writable.
 * The pixels are released with [`grnc_buffer_free`].
 */
enum GrncStatus grnc_decode_rgb(const struct GrncModel *model,
                                const uint8_t *stream,
                                size_t len,
                                uint32_t iterations,
                                int32_t strict,
                                uint8_t **out_rgb,
                                size_t *out_len,
                                uint32_t *out_width,
                                uint32_t *out_height);

/**
 * Releases a buffer returned by the library. Null is ignored.
 *
 * # Safety
 * `ptr` and `len` must be exactly as returned, and freed only once.
 */
void grnc_buffer_free(uint8_t *ptr, size_t len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* GRNC_H */
