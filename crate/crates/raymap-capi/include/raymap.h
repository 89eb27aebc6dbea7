#ifndef RAYMAP_H
#define RAYMAP_H

/* Generated by cbindgen from the raymap-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible entry point. Anything other than
// RAYMAP_OK leaves a message in raymap_last_error.
typedef enum {
  RAYMAP_OK = 0,
  // A required pointer argument was NULL.
  RAYMAP_ERR_NULL_ARGUMENT = 1,
  // An argument was malformed (bad key, bad UTF-8, bad pose, bad buffer
  // contents).
  RAYMAP_ERR_INVALID_ARGUMENT = 2,
  // The configuration failed validation.
  RAYMAP_ERR_INVALID_CONFIG = 3,
  // The pipeline rejected the operation.
  RAYMAP_ERR_PIPELINE = 4,
  // A filesystem operation failed.
  RAYMAP_ERR_IO = 5,
  // A panic was caught at the boundary; the handle should be freed.
  RAYMAP_ERR_INTERNAL = 6,
} raymap_status;

// Opaque pipeline configuration handle.
typedef struct raymap_config raymap_config;

// Opaque mapping pipeline handle.
typedef struct raymap_pipeline raymap_pipeline;

// Map statistics snapshot filled by raymap_pipeline_counts.
typedef struct {
  // Frames accepted so far.
  uint64_t frames;
  // Fused semantic voxels.
  uint64_t semantic_voxels;
  // Direction-binned ray frontier entries.
  uint64_t ray_entries;
  // Occupancy regions (fine cells plus merged super-voxels).
  uint64_t occupancy_regions;
  // Coarse frontier cells.
  uint64_t frontiers;
} raymap_counts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failed call on this thread, or NULL when the
// most recent call succeeded. The pointer stays valid until the next
// raymap_* call from the same thread.
const char *raymap_last_error(void);

// Library version as a static NUL-terminated string.
const char *raymap_version(void);

// Allocates a configuration preloaded with the library defaults. Never
// fails. Free with raymap_config_free.
raymap_config *raymap_config_new(void);

// Releases a configuration handle. NULL is accepted and ignored.
//
// # Safety
// `cfg` must be NULL or a pointer from raymap_config_new that has not been
// freed yet; it must not be used afterwards.
void raymap_config_free(raymap_config *cfg);

// Sets a numeric or boolean field by its snake_case name; booleans take 0
// or 1, integer fields reject fractional values. The representation field
// has its own setter.
//
// # Safety
// `cfg` must be a live pointer from raymap_config_new and `key` a
// NUL-terminated string; both must stay valid for the duration of the call.
raymap_status raymap_config_set(raymap_config *cfg, const char *key, double value);

// Reads a numeric or boolean field by its snake_case name into `out`
// (booleans come back as 0 or 1).
//
// # Safety
// `cfg` must be a live pointer from raymap_config_new, `key` a
// NUL-terminated string, and `out` a writable double.
raymap_status raymap_config_get(const raymap_config *cfg, const char *key, double *out);

// Selects the map representation by name: one of "ray_frontiers",
// "sem_poses", "sem_voxels", "spherical_fronts", "unidirectional_fronts".
//
// # Safety
// `cfg` must be a live pointer from raymap_config_new and `name` a
// NUL-terminated string.
raymap_status raymap_config_set_representation(raymap_config *cfg, const char *name);

// Checks the configuration without building a pipeline.
//
// # Safety
// `cfg` must be a live pointer from raymap_config_new.
raymap_status raymap_config_validate(const raymap_config *cfg);

// Builds a pipeline from the configuration (validating it first). Returns
// NULL on failure with the reason in raymap_last_error. The config handle
// stays owned by the caller and can be freed or reused afterwards.
//
// # Safety
// `cfg` must be NULL (which fails cleanly) or a live pointer from
// raymap_config_new.
raymap_pipeline *raymap_pipeline_new(const raymap_config *cfg);

// Releases a pipeline handle. NULL is accepted and ignored.
//
// # Safety
// `pipe` must be NULL or a pointer from raymap_pipeline_new that has not
// been freed yet; it must not be used afterwards.
void raymap_pipeline_free(raymap_pipeline *pipe);

// Feeds one posed frame into the map.
//
// `pose` is a row-major 4x4 world-from-camera matrix (16 doubles, last row
// 0 0 0 1, camera x right / y down / z forward). `intrinsics` is six
// doubles {fx, fy, cx, cy, width, height} with integral positive sizes.
// `depth` holds width*height meters in row-major order, +infinity for
// pixels with no return inside the sensing range; every value must be
// positive or +infinity. `features` holds width*height*feature_dim values,
// row-major with the feature dimension innermost.
//
// # Safety
// All pointers must be non-NULL and the buffers at least as long as the
// lengths documented above for the duration of the call.
raymap_status raymap_pipeline_process_frame(raymap_pipeline *pipe,
                                            const double *pose,
                                            const double *intrinsics,
                                            uint32_t feature_dim,
                                            const float *depth,
                                            const float *features);

// Flushes buffered points and rays; call once after the last frame.
//
// # Safety
// `pipe` must be a live pointer from raymap_pipeline_new.
raymap_status raymap_pipeline_finish(raymap_pipeline *pipe);

// Fills `out` with the current map statistics.
//
// # Safety
// `pipe` must be a live pointer from raymap_pipeline_new and `out` a
// writable raymap_counts.
raymap_status raymap_pipeline_counts(const raymap_pipeline *pipe, raymap_counts *out);

// Writes the map artifacts into `out_dir` (created if missing):
// voxels.csv, rays.txt, and occupancy.txt.
//
// # Safety
// `pipe` must be a live pointer from raymap_pipeline_new and `out_dir` a
// NUL-terminated path string.
raymap_status raymap_pipeline_export(const raymap_pipeline *pipe, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAYMAP_H */
