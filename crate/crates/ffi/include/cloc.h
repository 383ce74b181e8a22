#ifndef CLOC_H
#define CLOC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum ClocStatus {
  CLOC_STATUS_OK = 0,
  CLOC_STATUS_NULL_POINTER = 1,
  CLOC_STATUS_INVALID_ARGUMENT = 2,
  CLOC_STATUS_IO = 3,
  CLOC_STATUS_CORRUPT_FILE = 4,
  CLOC_STATUS_EMPTY_INDEX = 5,
  CLOC_STATUS_BUFFER_TOO_SMALL = 6,
  CLOC_STATUS_INTERNAL = 7,
} ClocStatus;

// A retrieval index and the descriptor options it was built with.
typedef struct ClocIndex ClocIndex;

// A trained network together with its condition routing.
typedef struct ClocModel ClocModel;

// Camera-to-world pose: unit quaternion `[w, x, y, z]` and camera centre.
typedef struct ClocPose {
  double rotation[4];
  double translation[3];
} ClocPose;

// One ranked index entry.
typedef struct ClocMatch {
  uint32_t image_id;
  double similarity;
  struct ClocPose pose;
} ClocMatch;

typedef struct ClocPoseError {
  double translation_m;
  double rotation_deg;
} ClocPoseError;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on the same thread.
const char *cloc_last_error(void);

// Loads a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ClocStatus cloc_model_load(const char *path, struct ClocModel **out);

// Releases a model; NULL is ignored.
//
// # Safety
// `model` must come from [`cloc_model_load`] and not be used afterwards.
void cloc_model_free(struct ClocModel *model);

// Descriptor length produced by `model`.
//
// # Safety
// `model` must be a live handle.
size_t cloc_model_descriptor_dim(const struct ClocModel *model);

// Number of declared conditions; condition ids run from 0 to this − 1.
//
// # Safety
// `model` must be a live handle.
size_t cloc_model_condition_count(const struct ClocModel *model);

// Single-scale descriptor of an `height×width×3` row-major image captured
// under `condition`, written to `out` (length [`cloc_model_descriptor_dim`]).
//
// # Safety
// `pixels` must point to `height·width·3` doubles and `out` to `out_len`.
enum ClocStatus cloc_model_describe(const struct ClocModel *model,
                                    const double *pixels,
                                    size_t height,
                                    size_t width,
                                    uint32_t condition,
                                    double *out,
                                    size_t out_len);

// Loads an index file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ClocStatus cloc_index_load(const char *path, struct ClocIndex **out);

// Releases an index; NULL is ignored.
//
// # Safety
// `index` must come from [`cloc_index_load`] and not be used afterwards.
void cloc_index_free(struct ClocIndex *index);

// # Safety
// `index` must be a live handle.
size_t cloc_index_len(const struct ClocIndex *index);

// Top-`k` entries for an already final (whitened if the index is)
// descriptor. Writes at most `k` matches to `out` and their count to
// `written`.
//
// # Safety
// `descriptor` must point to `dim` doubles and `out` to room for `k`
// matches.
enum ClocStatus cloc_index_query(const struct ClocIndex *index,
                                 const double *descriptor,
                                 size_t dim,
                                 size_t k,
                                 struct ClocMatch *out,
                                 size_t *written);

// Describes an image with the index's extraction options (multi-scale,
// whitening) and returns its top-`k` entries; `out[0].pose` is the
// localization estimate.
//
// # Safety
// Pointer arguments as in [`cloc_model_describe`] and
// [`cloc_index_query`].
enum ClocStatus cloc_localize(const struct ClocIndex *index,
                              const struct ClocModel *model,
                              const double *pixels,
                              size_t height,
                              size_t width,
                              uint32_t condition,
                              size_t k,
                              struct ClocMatch *out,
                              size_t *written);

// Translation and geodesic rotation error between two poses.
//
// # Safety
// All pointers must be valid.
enum ClocStatus cloc_pose_error(const struct ClocPose *estimated,
                                const struct ClocPose *ground_truth,
                                struct ClocPoseError *out);

// Generalized-mean pooling of a `positions×channels` row-major array
// into `channels` values.
//
// # Safety
// `x` must point to `positions·channels` doubles, `out` to `channels`.
enum ClocStatus cloc_gem(const double *x, size_t positions, size_t channels, double p, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLOC_H */
