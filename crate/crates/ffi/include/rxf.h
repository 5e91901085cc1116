#ifndef RXF_H
#define RXF_H

/* generated by cbindgen from crates/ffi; do not edit */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success code returned by every fallible function.
 */
#define RXF_OK 0

/**
 * A required pointer argument was null.
 */
#define RXF_NULL_POINTER 1

/**
 * The callee panicked; state may be inconsistent.
 */
#define RXF_PANIC 2

/**
 * The output buffer was too small; partial results were written.
 */
#define RXF_BUFFER_TOO_SMALL 3

/**
 * Opaque handle to a loaded detection system.
 */
typedef struct RxfSystem RxfSystem;

/**
 * One detection in image coordinates.
 */
typedef struct RxfDetection {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
  double score;
  int class_id;
} RxfDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rxf_version(void);

/**
 * Copies the last error message for the calling thread into `buf`
 * (NUL-terminated, truncated to `cap`). Returns the full message length.
 */
uintptr_t rxf_last_error_message(char *buf, uintptr_t cap);

/**
 * Loads a full-system checkpoint. On success `*out` owns the system and
 * must be released with `rxf_system_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
int rxf_system_load(const char *path, struct RxfSystem **out);

/**
 * Releases a system handle. Passing null is a no-op.
 *
 * # Safety
 * `system` must be a pointer returned by `rxf_system_load`, released at
 * most once.
 */
void rxf_system_free(struct RxfSystem *system);

/**
 * Number of scenes the loaded classifier can route to.
 *
 * # Safety
 * `system` must be a valid handle.
 */
uintptr_t rxf_system_num_scenes(const struct RxfSystem *system);

/**
 * Side length of the square images the system expects.
 *
 * # Safety
 * `system` must be a valid handle.
 */
uintptr_t rxf_system_image_size(const struct RxfSystem *system);

/**
 * Copies the scene label at `index` into `buf` (NUL-terminated). Returns
 * the label length, or 0 for an invalid handle or index.
 *
 * # Safety
 * `system` must be a valid handle; `buf` must hold `cap` bytes.
 */
uintptr_t rxf_system_scene_name(const struct RxfSystem *system,
                                uintptr_t index,
                                char *buf,
                                uintptr_t cap);

/**
 * Scene-adaptive detection on one RGB/X image pair.
 *
 * `rgb` holds `3 * image_size * image_size` doubles in channel-major
 * order; `x` holds `image_size * image_size` doubles. Up to `cap`
 * detections are written to `detections`; `*out_count` receives the
 * number available. `*out_scene` receives the routed scene index.
 *
 * # Safety
 * All pointers must be valid for the documented lengths.
 */
int rxf_system_detect(const struct RxfSystem *system,
                      const double *rgb,
                      const double *x,
                      uintptr_t image_size,
                      struct RxfDetection *detections,
                      uintptr_t cap,
                      uintptr_t *out_count,
                      uintptr_t *out_scene);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RXF_H */
