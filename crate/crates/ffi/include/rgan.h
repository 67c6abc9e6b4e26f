#ifndef RGAN_H
#define RGAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RganStatus {
  RGAN_STATUS_OK = 0,
  RGAN_STATUS_NULL_POINTER = 1,
  RGAN_STATUS_INVALID_ARGUMENT = 2,
  RGAN_STATUS_IO = 3,
  RGAN_STATUS_CHECKPOINT = 4,
  RGAN_STATUS_SHAPE = 5,
  RGAN_STATUS_INTERNAL = 6,
  RGAN_STATUS_PANIC = 7,
} RganStatus;

typedef enum RganApproach {
  RGAN_APPROACH_A1 = 1,
  RGAN_APPROACH_A2 = 2,
} RganApproach;

// A loaded generator. Create with [`rgan_model_load`], release with
// [`rgan_model_free`].
typedef struct RganModel RganModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rgan_version(void);

// Message of the last failure on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *rgan_last_error_message(void);

// Loads a checkpoint directory, verifying its checksums.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum RganStatus rgan_model_load(const char *path, struct RganModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from [`rgan_model_load`] and not be used afterwards.
void rgan_model_free(struct RganModel *model);

// # Safety
// `model` must be a live handle; the out pointers must be writable.
enum RganStatus rgan_model_image_size(const struct RganModel *model,
                                      uintptr_t *out_height,
                                      uintptr_t *out_width);

// # Safety
// `model` must be a live handle; `out` must be writable.
enum RganStatus rgan_model_approach(const struct RganModel *model, enum RganApproach *out);

// Trainable parameter count of the whole bundle.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum RganStatus rgan_param_count(const struct RganModel *model, uint64_t *out);

// Stylises one image. `height` and `width` must equal the model's image
// size.
//
// # Safety
// `content`, `style` and `out` must each point to
// `height * width * 3` floats; `out` must be writable.
enum RganStatus rgan_transfer(const struct RganModel *model,
                              const float *content,
                              const float *style,
                              uintptr_t height,
                              uintptr_t width,
                              float *out);

// Reads two image files, stylises and writes a PNG to `out_path`.
//
// # Safety
// All paths must be NUL-terminated strings.
enum RganStatus rgan_transfer_files(const struct RganModel *model,
                                    const char *content_path,
                                    const char *style_path,
                                    const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RGAN_H */
