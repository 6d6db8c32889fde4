#ifndef FSTEREO_H
#define FSTEREO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsStatus {
  FS_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8 or an out-of-range argument.
   */
  FS_STATUS_INVALID_ARGUMENT = 1,
  FS_STATUS_CONFIG = 2,
  /**
   * Extent or layout mismatch.
   */
  FS_STATUS_SHAPE = 3,
  FS_STATUS_FORMAT = 4,
  FS_STATUS_IO = 5,
  FS_STATUS_NUMERICAL = 6,
  FS_STATUS_DATA = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  FS_STATUS_INTERNAL = 8,
} FsStatus;

/**
 * Opaque disparity map handle.
 */
typedef struct FsDisparity FsDisparity;

/**
 * Opaque model handle.
 */
typedef struct FsModel FsModel;

typedef struct FsMetrics {
  double epe;
  /**
   * Percentage of valid pixels with error strictly above the threshold.
   */
  double bad_pixel;
  double d1;
  uint64_t n_valid;
} FsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; valid until the next failing call.
 */
const char *fs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fs_version(void);

/**
 * Create a model from a preset name (`toy`, `micro`, `full`) with fresh weights.
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum FsStatus fs_model_new(const char *preset, struct FsModel **out);

/**
 * Load weights from a checkpoint file into an existing model.
 *
 * # Safety
 * `model` must come from [`fs_model_new`]; `path` must be NUL-terminated.
 */
enum FsStatus fs_model_load(struct FsModel *model, const char *path);

/**
 * Write the model weights to a checkpoint file.
 *
 * # Safety
 * `model` must come from [`fs_model_new`]; `path` must be NUL-terminated.
 */
enum FsStatus fs_model_save(const struct FsModel *model, const char *path);

/**
 * Number of trainable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from [`fs_model_new`].
 */
uint64_t fs_model_num_parameters(const struct FsModel *model);

/**
 * Maximum disparity D of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from [`fs_model_new`].
 */
uint32_t fs_model_max_disparity(const struct FsModel *model);

/**
 * # Safety
 * `model` must be null or come from [`fs_model_new`] and not be used afterwards.
 */
void fs_model_free(struct FsModel *model);

/**
 * Predict disparity for an interleaved 8-bit RGB pair of `height * width`
 * pixels into `out` (`height * width` floats, row-major). `iters == 0`
 * selects the model's inference default.
 *
 * # Safety
 * `left` and `right` must hold `3 * height * width` bytes and `out` room for
 * `height * width` floats.
 */
enum FsStatus fs_model_predict(const struct FsModel *model,
                               const uint8_t *left,
                               const uint8_t *right,
                               uint32_t height,
                               uint32_t width,
                               uint32_t iters,
                               float *out);

/**
 * Read a PFM disparity file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum FsStatus fs_pfm_read(const char *path, struct FsDisparity **out);

/**
 * Write `height * width` row-major floats as a little-endian PFM file.
 *
 * # Safety
 * `path` must be NUL-terminated; `data` must hold `height * width` floats.
 */
enum FsStatus fs_pfm_write(const char *path, const float *data, uint32_t height, uint32_t width);

/**
 * # Safety
 * `d` must be null or come from [`fs_pfm_read`].
 */
uint32_t fs_disparity_height(const struct FsDisparity *d);

/**
 * # Safety
 * `d` must be null or come from [`fs_pfm_read`].
 */
uint32_t fs_disparity_width(const struct FsDisparity *d);

/**
 * Row-major values owned by the handle, or null for a null handle.
 *
 * # Safety
 * `d` must be null or come from [`fs_pfm_read`].
 */
const float *fs_disparity_data(const struct FsDisparity *d);

/**
 * # Safety
 * `d` must be null or come from [`fs_pfm_read`] and not be used afterwards.
 */
void fs_disparity_free(struct FsDisparity *d);

/**
 * EPE, bad-pixel percentage at `threshold` and D1 over pixels where `valid`
 * is nonzero. A null `valid` treats every pixel as valid.
 *
 * # Safety
 * `pred`, `gt` (and `valid` if non-null) must hold `height * width` entries.
 */
enum FsStatus fs_metrics(const float *pred,
                         const float *gt,
                         const uint8_t *valid,
                         uint32_t height,
                         uint32_t width,
                         double threshold,
                         struct FsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSTEREO_H */
