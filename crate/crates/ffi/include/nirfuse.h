/* C interface for the nirfuse image denoiser. */

#ifndef NIRFUSE_H
#define NIRFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum NirfuseStatus {
  NirfuseStatus_Ok = 0,
  /**
   * Bad argument or configuration.
   */
  NirfuseStatus_InvalidArgument = 1,
  /**
   * Unreadable or malformed data (checkpoint, image, manifest).
   */
  NirfuseStatus_DataError = 2,
  /**
   * Non-finite values or a failed numerical invariant.
   */
  NirfuseStatus_NumericalError = 3,
  /**
   * A required pointer was null.
   */
  NirfuseStatus_NullPointer = 4,
  /**
   * Internal panic; state may be inconsistent, free the handle.
   */
  NirfuseStatus_Panic = 5,
} NirfuseStatus;

/**
 * Opaque denoiser handle.
 */
typedef struct NirfuseModel NirfuseModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nirfuse_version(void);

/**
 * Message for the most recent error on this thread, or null if none.
 * The pointer is valid until the next failing call on the same thread.
 */
const char *nirfuse_last_error(void);

/**
 * Load a trained model from a checkpoint file. On success writes a
 * handle to `out`; release it with `nirfuse_model_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid
 * pointer to writable storage.
 */
enum NirfuseStatus nirfuse_model_load(const char *path, struct NirfuseModel **out);

/**
 * Release a handle returned by `nirfuse_model_load`. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer from `nirfuse_model_load`, freed once.
 */
void nirfuse_model_free(struct NirfuseModel *model);

/**
 * Spatial divisor inputs must satisfy (a power of two set by the
 * model's scale count). Returns 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t nirfuse_model_spatial_multiple(const struct NirfuseModel *model);

/**
 * 1 if the model consumes a guide image, 0 if it denoises RGB alone,
 * -1 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
int nirfuse_model_uses_guide(const struct NirfuseModel *model);

/**
 * Denoise one image. `rgb` holds 3*height*width doubles, `guide`
 * holds height*width doubles and may be null for models that ignore
 * it, `out` receives 3*height*width doubles. Width and height must be
 * multiples of `nirfuse_model_spatial_multiple`.
 *
 * # Safety
 * All non-null pointers must reference buffers of the documented
 * lengths; `model` must be a live handle.
 */
enum NirfuseStatus nirfuse_denoise(const struct NirfuseModel *model,
                                   const double *rgb,
                                   const double *guide,
                                   size_t height,
                                   size_t width,
                                   double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* NIRFUSE_H */
