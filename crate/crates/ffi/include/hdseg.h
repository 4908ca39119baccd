/* SPDX-License-Identifier: Apache-2.0 */

#ifndef HDSEG_H
#define HDSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum HdsegStatus {
  HDSEG_STATUS_OK = 0,
  HDSEG_STATUS_NULL_POINTER = 1,
  HDSEG_STATUS_INVALID_ARGUMENT = 2,
  HDSEG_STATUS_IO = 3,
  HDSEG_STATUS_CHECKPOINT = 4,
  HDSEG_STATUS_CONFIG = 5,
  HDSEG_STATUS_INPUT = 6,
  HDSEG_STATUS_BUFFER_TOO_SMALL = 7,
  HDSEG_STATUS_INTERNAL = 8,
  HDSEG_STATUS_PANIC = 9,
} HdsegStatus;

/**
 * Connection rule for block topologies.
 */
typedef enum HdsegRule {
  HDSEG_RULE_HD = 0,
  HDSEG_RULE_LITE_HD = 1,
} HdsegRule;

/**
 * Trained or freshly initialised segmentation network.
 */
typedef struct HdsegModel HdsegModel;

/**
 * Cylindrical projection settings. Angles in degrees; `fov_down_deg` is a
 * positive magnitude below the horizon.
 */
typedef struct HdsegProjection {
  size_t height;
  size_t width;
  double fov_up_deg;
  double fov_down_deg;
} HdsegProjection;

/**
 * Neighbour refinement settings.
 */
typedef struct HdsegKnn {
  size_t window;
  size_t k;
  double sigma;
  double cutoff;
} HdsegKnn;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * Valid until the next call on the same thread.
 */
const char *hdseg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hdseg_version(void);

/**
 * Loads a checkpoint written by `hdseg train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HdsegStatus hdseg_model_load(const char *path, struct HdsegModel **out);

/**
 * Creates an untrained small network with `class_count` classes.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HdsegStatus hdseg_model_new_toy(size_t class_count, uint64_t seed, struct HdsegModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum HdsegStatus hdseg_model_save(const struct HdsegModel *model, const char *path);

/**
 * Releases a model. Null is accepted.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void hdseg_model_free(struct HdsegModel *model);

/**
 * Number of output classes.
 *
 * # Safety
 * `model` must come from this library; `out` must be valid.
 */
enum HdsegStatus hdseg_model_class_count(const struct HdsegModel *model, size_t *out);

/**
 * Labels `n` points given as rows of `[x, y, z, remission]`. Writes one
 * class per point to `labels`. Points outside the field of view get
 * `ignore`. With a non-null `knn` the labels are refined by range-aware
 * neighbour voting.
 *
 * # Safety
 * `points` must hold `4 * n` floats and `labels` room for `n` values.
 */
enum HdsegStatus hdseg_segment_points(const struct HdsegModel *model,
                                      const float *points,
                                      size_t n,
                                      const struct HdsegProjection *projection,
                                      const struct HdsegKnn *knn,
                                      uint32_t ignore,
                                      uint32_t *labels);

/**
 * Projects `n` points to a `[5, H, W]` range image (channels x, y, z,
 * remission, range; empty pixels are zero). `image` must hold
 * `5 * H * W` floats. `pixel_of_point` may be null; otherwise it receives
 * `n` row-major pixel indices `v * W + u`, with `-1` for points outside
 * the field of view. Points hidden by a closer one keep their pixel.
 *
 * # Safety
 * Buffers must have the sizes stated above.
 */
enum HdsegStatus hdseg_project(const float *points,
                               size_t n,
                               const struct HdsegProjection *projection,
                               float *image,
                               size_t image_len,
                               int64_t *pixel_of_point);

/**
 * Predecessors of layer `layer` (1-based) under `rule`, ascending. The set
 * size goes to `count`; at most `capacity` values are written.
 *
 * # Safety
 * `out` must have room for `capacity` values; `count` must be valid.
 */
enum HdsegStatus hdseg_topology_predecessors(size_t layer,
                                             enum HdsegRule rule,
                                             size_t *out,
                                             size_t capacity,
                                             size_t *count);

/**
 * Total connections in a block of `layers` layers.
 *
 * # Safety
 * `total` must be valid.
 */
enum HdsegStatus hdseg_topology_connections(size_t layers, enum HdsegRule rule, size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HDSEG_H */
