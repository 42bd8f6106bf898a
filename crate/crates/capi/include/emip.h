/* C interface for the emip weak-label / projection pipeline. */

#ifndef EMIP_H
#define EMIP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which 2D plane [`emip_run_plane`] copies out.
 */
typedef enum EmipPlane {
  EMIP_PLANE_NUCLEI_MIP = 0,
  EMIP_PLANE_MARKER_MIP = 1,
  EMIP_PLANE_NUCLEI_EMIP = 2,
  EMIP_PLANE_MARKER_EMIP = 3,
} EmipPlane;

/**
 * Result code of every fallible entry point.
 */
typedef enum EmipStatus {
  EMIP_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  EMIP_STATUS_NULL_ARGUMENT = 1,
  /**
   * Inputs failed validation (dimensions, intensity range, duplicate
   * points, bad config text, index out of range).
   */
  EMIP_STATUS_INVALID_ARGUMENT = 2,
  /**
   * An output buffer is smaller than the data it must receive.
   */
  EMIP_STATUS_BUFFER_TOO_SMALL = 3,
  /**
   * An internal panic was caught at the ABI boundary.
   */
  EMIP_STATUS_PANICKED = 4,
} EmipStatus;

/**
 * Opaque: an ordered set of point annotations.
 */
typedef struct EmipAnnotations EmipAnnotations;

/**
 * Opaque: the outputs of one pipeline run.
 */
typedef struct EmipRun EmipRun;

/**
 * Opaque: a two-channel volume (nuclei + marker, identical dimensions).
 */
typedef struct EmipVolume EmipVolume;

/**
 * One point annotation: a nucleus center plus its class id.
 */
typedef struct EmipPoint {
  uint32_t x;
  uint32_t y;
  uint32_t z;
  uint32_t class_id;
} EmipPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the library as a static NUL-terminated string.
 */
const char *emip_version(void);

/**
 * Message describing the current thread's most recent failure, or null if
 * none occurred yet. Valid until the next failing call on the same thread.
 */
const char *emip_last_error(void);

/**
 * Builds a volume from two row-major `width * height * depth` intensity
 * arrays in [0, 1], slices ordered by z. The data is copied.
 *
 * # Safety
 * `nuclei` and `marker` must point to `width * height * depth` readable
 * floats; `out` must be a valid location to store the handle.
 */
enum EmipStatus emip_volume_create(uint32_t width,
                                   uint32_t height,
                                   uint32_t depth,
                                   const float *nuclei,
                                   const float *marker,
                                   struct EmipVolume **out);

/**
 * Releases a volume handle. Null is a no-op.
 *
 * # Safety
 * `vol` must be null or a handle from [`emip_volume_create`] not yet freed.
 */
void emip_volume_free(struct EmipVolume *vol);

/**
 * Builds an annotation set from `len` points. Point order defines the cell
 * ids used by every per-cell accessor. Duplicate (x, y) pairs are rejected.
 *
 * # Safety
 * `points` must point to `len` readable [`EmipPoint`] values; `out` must be
 * a valid location to store the handle.
 */
enum EmipStatus emip_annotations_create(const struct EmipPoint *points,
                                        size_t len,
                                        struct EmipAnnotations **out);

/**
 * Releases an annotation handle. Null is a no-op.
 *
 * # Safety
 * `ann` must be null or a handle from [`emip_annotations_create`] not yet
 * freed.
 */
void emip_annotations_free(struct EmipAnnotations *ann);

/**
 * Runs the full chain (distance map, clustering, Voronoi label, per-cell
 * slice sets, projections, per-cell classes) and returns a run handle.
 *
 * `config` is optional: null for defaults, otherwise flat `key = value`
 * lines (`#` comments allowed) with the same keys as the CLI config file.
 *
 * # Safety
 * `vol` and `ann` must be live handles; `config` must be null or a
 * NUL-terminated string; `out` must be a valid location to store the handle.
 */
enum EmipStatus emip_run_create(const struct EmipVolume *vol,
                                const struct EmipAnnotations *ann,
                                const char *config,
                                struct EmipRun **out);

/**
 * Releases a run handle. Null is a no-op.
 *
 * # Safety
 * `run` must be null or a handle from [`emip_run_create`] not yet freed.
 */
void emip_run_free(struct EmipRun *run);

/**
 * Writes the projection width and height.
 *
 * # Safety
 * `run` must be a live handle; `width` and `height` must be valid locations.
 */
enum EmipStatus emip_run_dims(const struct EmipRun *run, uint32_t *width, uint32_t *height);

/**
 * Copies one projection plane into `out` as `width * height` row-major
 * floats; `len` must be exactly that count.
 *
 * # Safety
 * `run` must be a live handle; `out` must point to `len` writable floats.
 */
enum EmipStatus emip_run_plane(const struct EmipRun *run,
                               enum EmipPlane plane,
                               float *out,
                               size_t len);

/**
 * Writes the number of cells (one per annotation, in annotation order).
 *
 * # Safety
 * `run` must be a live handle; `out` must be a valid location.
 */
enum EmipStatus emip_run_cell_count(const struct EmipRun *run, size_t *out);

/**
 * Copies cell `cell`'s slice indices into `out` (capacity `cap`) and writes
 * the count to `written`. With a null `out`, only the count is written, so
 * callers can size the buffer with a first call.
 *
 * # Safety
 * `run` must be a live handle; `out` must be null or point to `cap` writable
 * u32 values; `written` must be a valid location.
 */
enum EmipStatus emip_run_slice_set(const struct EmipRun *run,
                                   size_t cell,
                                   uint32_t *out,
                                   size_t cap,
                                   size_t *written);

/**
 * Writes cell `cell`'s class id (0 = negative, 1 = positive) as read off
 * the projected marker with the configured threshold.
 *
 * # Safety
 * `run` must be a live handle; `out` must be a valid location.
 */
enum EmipStatus emip_run_cell_class(const struct EmipRun *run, size_t cell, uint32_t *out);

/**
 * Number of warnings the run produced (cells that fell back to the full
 * z range because their slice set came out empty).
 *
 * # Safety
 * `run` must be a live handle; `out` must be a valid location.
 */
enum EmipStatus emip_run_warning_count(const struct EmipRun *run, size_t *out);

/**
 * Warning `idx` as a NUL-terminated string owned by the run handle, or null
 * if `idx` is out of range. Valid until the handle is freed.
 *
 * # Safety
 * `run` must be a live handle.
 */
const char *emip_run_warning(const struct EmipRun *run, size_t idx);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMIP_H */
