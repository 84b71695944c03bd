#ifndef VOIDSCAN_H
#define VOIDSCAN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum VsStatus {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_IO = 3,
  VS_STATUS_UNSUPPORTED_IMAGE = 4,
  VS_STATUS_CHECKPOINT = 5,
  VS_STATUS_OUT_OF_RANGE = 6,
  VS_STATUS_INTERNAL = 7,
  VS_STATUS_PANIC = 8,
} VsStatus;

// How a ball position was obtained.
typedef enum VsBallSource {
  VS_BALL_SOURCE_DETECTED = 0,
  VS_BALL_SOURCE_INTERPOLATED = 1,
  VS_BALL_SOURCE_REFINED = 2,
} VsBallSource;

// Balls located on one board.
typedef struct VsBallGrid VsBallGrid;

// 8-bit grayscale image.
typedef struct VsImage VsImage;

// Loaded U-Net checkpoint.
typedef struct VsModel VsModel;

// One located ball. `row` and `col` are -1 when the ball is off-grid.
typedef struct VsBall {
  double cx;
  double cy;
  double r;
  int64_t row;
  int64_t col;
  enum VsBallSource source;
} VsBall;

// Post-processed prediction for one crop.
typedef struct VsVoidResult {
  // Void pixels inside the ball disc, in percent.
  double void_percentage;
  size_t region_count;
  // Pixels in the retained regions.
  size_t void_pixels;
} VsVoidResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if none. The pointer
// stays valid until the next failing call on the same thread.
const char *vs_last_error_message(void);

// Loads an 8-bit grayscale PNG.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VsStatus vs_image_load(const char *path, struct VsImage **out);

// Copies a row-major 8-bit buffer with `stride` bytes per row.
//
// # Safety
// `pixels` must point to at least `stride * (height - 1) + width` bytes.
enum VsStatus vs_image_from_pixels(size_t width,
                                   size_t height,
                                   const uint8_t *pixels,
                                   size_t stride,
                                   struct VsImage **out);

// # Safety
// `img` must be null or a live image handle.
size_t vs_image_width(const struct VsImage *img);

// # Safety
// `img` must be null or a live image handle.
size_t vs_image_height(const struct VsImage *img);

// Row-major pixel data, `width * height` bytes, owned by the handle.
//
// # Safety
// `img` must be null or a live image handle.
const uint8_t *vs_image_data(const struct VsImage *img);

// # Safety
// `img` must be null or a handle not yet freed.
void vs_image_free(struct VsImage *img);

// Locates the balls on a board with default extraction settings.
//
// # Safety
// `board` must be a live image handle and `out` writable.
enum VsStatus vs_extract_balls(const struct VsImage *board, struct VsBallGrid **out);

// # Safety
// `grid` must be null or a live grid handle.
size_t vs_ball_grid_len(const struct VsBallGrid *grid);

// # Safety
// `grid` must be a live grid handle and `out` writable.
enum VsStatus vs_ball_grid_get(const struct VsBallGrid *grid, size_t index, struct VsBall *out);

// Square crop of side `size` centred on ball `index`; off-board pixels are 0.
//
// # Safety
// `board` and `grid` must be live handles and `out` writable.
enum VsStatus vs_ball_crop(const struct VsImage *board,
                           const struct VsBallGrid *grid,
                           size_t index,
                           size_t size,
                           struct VsImage **out);

// # Safety
// `grid` must be null or a handle not yet freed.
void vs_ball_grid_free(struct VsBallGrid *grid);

// Loads a U-Net checkpoint (the JSON sidecar must sit next to it).
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VsStatus vs_model_load(const char *path, struct VsModel **out);

// Side length of the square crops the model expects.
//
// # Safety
// `model` must be null or a live model handle.
size_t vs_model_input_size(const struct VsModel *model);

// Segments one crop and measures its voids inside the ball disc
// (`cx`, `cy`, `r` in crop coordinates).
//
// Probabilities above `threshold` are void; regions under `a_min` pixels
// are dropped. When `mask_out` is not null it receives the final mask,
// 0 or 255 per pixel, and must hold `mask_len >= size * size` bytes.
//
// # Safety
// Handles must be live; `mask_out` must be null or hold `mask_len` bytes.
enum VsStatus vs_predict(const struct VsModel *model,
                         const struct VsImage *crop,
                         double cx,
                         double cy,
                         double r,
                         float threshold,
                         size_t a_min,
                         uint8_t *mask_out,
                         size_t mask_len,
                         struct VsVoidResult *out);

// # Safety
// `model` must be null or a handle not yet freed.
void vs_model_free(struct VsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOIDSCAN_H */
