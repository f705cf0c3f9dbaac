/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef TESSELLATE_H
#define TESSELLATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum TsStatus {
  TS_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or a buffer of the wrong size.
   */
  TS_STATUS_INVALID_ARGUMENT = 1,
  TS_STATUS_INVALID_SPEC = 2,
  TS_STATUS_SHAPE = 3,
  TS_STATUS_OUT_OF_RANGE = 4,
  TS_STATUS_ALREADY_EXISTS = 5,
  TS_STATUS_IO = 6,
  TS_STATUS_FORMAT = 7,
  TS_STATUS_ALREADY_ACCUMULATED = 8,
  TS_STATUS_COVERAGE = 9,
  TS_STATUS_INCOMPLETE = 10,
  TS_STATUS_UNDEFINED_STATISTIC = 11,
  TS_STATUS_UNRECOGNIZED = 12,
  TS_STATUS_PANIC = 13,
} TsStatus;

/**
 * On-disk stitching state.
 */
typedef struct TsAccumulators TsAccumulators;

/**
 * Chunked `f32` array on disk.
 */
typedef struct TsArray TsArray;

/**
 * Immutable list of window placements.
 */
typedef struct TsPlan TsPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ts_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void ts_string_free(char *s);

/**
 * Builds a plan for an `(items, channels, spatial...)` tensor. `spatial`,
 * `window`, `step` and `border` each hold `rank` values; `border` may be
 * null for no border.
 *
 * # Safety
 * Array arguments must point to `rank` readable values; `out` must be writable.
 */
enum TsStatus ts_plan_new(size_t items,
                          size_t channels,
                          const size_t *spatial,
                          size_t rank,
                          const size_t *window,
                          const size_t *step,
                          const size_t *border,
                          float border_weight,
                          struct TsPlan **out);

/**
 * # Safety
 * `plan` must be null or a live handle from this library.
 */
void ts_plan_free(struct TsPlan *plan);

/**
 * Number of placements, 0 for a null handle.
 *
 * # Safety
 * `plan` must be null or a live handle.
 */
size_t ts_plan_len(const struct TsPlan *plan);

/**
 * Number of spatial axes, 0 for a null handle.
 *
 * # Safety
 * `plan` must be null or a live handle.
 */
size_t ts_plan_rank(const struct TsPlan *plan);

/**
 * Values in one patch of `channels` channels (`channels * prod(window)`).
 *
 * # Safety
 * `plan` must be null or a live handle.
 */
size_t ts_plan_patch_len(const struct TsPlan *plan, size_t channels);

/**
 * Writes the item index and `rank` start coordinates of placement `index`.
 *
 * # Safety
 * `item` must be writable; `start` must hold `rank` writable values.
 */
enum TsStatus ts_plan_placement(const struct TsPlan *plan,
                                size_t index,
                                size_t *item,
                                size_t *start);

/**
 * Serializes the plan; release the string with `ts_string_free`.
 *
 * # Safety
 * `out` must be writable.
 */
enum TsStatus ts_plan_to_json(const struct TsPlan *plan, char **out);

/**
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum TsStatus ts_plan_from_json(const char *json, struct TsPlan **out);

/**
 * Writes the `prod(window)` stitching weights of placement `index`.
 *
 * # Safety
 * `out` must hold `out_len` writable values.
 */
enum TsStatus ts_weight_map(const struct TsPlan *plan, size_t index, float *out, size_t out_len);

/**
 * Cuts a dense C-order tensor matching the plan's layout into the
 * `(M, C, window...)` patch stack.
 *
 * # Safety
 * `values` must hold `len` readable values and `out` `out_len` writable ones.
 */
enum TsStatus ts_extract(const struct TsPlan *plan,
                         const float *values,
                         size_t len,
                         float *out,
                         size_t out_len);

/**
 * Creates stitching state for `output_channels`-channel results in
 * directory `path`, chunked by window.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum TsStatus ts_accumulators_create(const struct TsPlan *plan,
                                     size_t output_channels,
                                     const char *path,
                                     struct TsAccumulators **out);

/**
 * Reopens stitching state left by an earlier, possibly interrupted, run.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum TsStatus ts_accumulators_open(const char *path, struct TsAccumulators **out);

/**
 * # Safety
 * `acc` must be null or a live handle.
 */
void ts_accumulators_free(struct TsAccumulators *acc);

/**
 * Whether placement `index` has already been accumulated.
 *
 * # Safety
 * `acc` must be null or a live handle.
 */
bool ts_accumulators_contains(const struct TsAccumulators *acc, size_t index);

/**
 * Adds the result for placement `index`. Safe to call from several threads
 * on the same handle.
 *
 * # Safety
 * `values` must hold `len` readable values.
 */
enum TsStatus ts_accumulate(const struct TsAccumulators *acc,
                            size_t index,
                            const float *values,
                            size_t len);

/**
 * Persists the set of accumulated placements so a later
 * `ts_accumulators_open` can resume.
 *
 * # Safety
 * `acc` must be a live handle.
 */
enum TsStatus ts_accumulators_checkpoint(const struct TsAccumulators *acc);

/**
 * Divides accumulated sums by weights into `<path>/output`. With a null
 * `fill`, voxels without coverage fail with `TS_COVERAGE`; otherwise they
 * receive `*fill`.
 *
 * # Safety
 * `fill` must be null or readable; `out` must be writable.
 */
enum TsStatus ts_accumulators_finalize(const struct TsAccumulators *acc,
                                       const float *fill,
                                       struct TsArray **out);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum TsStatus ts_array_open(const char *path, struct TsArray **out);

/**
 * # Safety
 * `array` must be null or a live handle.
 */
void ts_array_free(struct TsArray *array);

/**
 * Number of dimensions, 0 for a null handle.
 *
 * # Safety
 * `array` must be null or a live handle.
 */
size_t ts_array_ndim(const struct TsArray *array);

/**
 * Writes the array's `ndim` extents.
 *
 * # Safety
 * `shape` must hold `ndim` writable values.
 */
enum TsStatus ts_array_shape(const struct TsArray *array, size_t *shape, size_t ndim);

/**
 * Reads the box at `start` with extents `shape` (each `ndim` long) in C order.
 *
 * # Safety
 * `start` and `shape` must hold `ndim` readable values; `out` must hold
 * `out_len` writable values.
 */
enum TsStatus ts_array_read_region(const struct TsArray *array,
                                   const size_t *start,
                                   const size_t *shape,
                                   size_t ndim,
                                   float *out,
                                   size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TESSELLATE_H */
