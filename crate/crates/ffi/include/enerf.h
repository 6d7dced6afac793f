#ifndef ENERF_H
#define ENERF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EnerfStatus {
  ENERF_STATUS_OK = 0,
  ENERF_STATUS_NULL_POINTER = 1,
  ENERF_STATUS_INVALID_ARGUMENT = 2,
  ENERF_STATUS_OUT_OF_RANGE = 3,
  ENERF_STATUS_IO = 4,
  ENERF_STATUS_DECODE = 5,
  ENERF_STATUS_NUMERIC = 6,
  ENERF_STATUS_INVALID_STATE = 7,
  ENERF_STATUS_UNSUPPORTED = 8,
  ENERF_STATUS_PANIC = 9,
} EnerfStatus;

typedef struct EnerfEvents EnerfEvents;

typedef struct EnerfModel EnerfModel;

typedef struct EnerfScene EnerfScene;

typedef struct EnerfTrajectory EnerfTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t enerf_last_error(char *buf, size_t len);

/**
 * The built-in toy scene.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EnerfStatus enerf_scene_toy(struct EnerfScene **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EnerfStatus enerf_scene_load(const char *path, struct EnerfScene **out);

/**
 * # Safety
 * `scene` must be null or a handle from this library.
 */
void enerf_scene_free(struct EnerfScene *scene);

/**
 * Circular orbit; `oscillating` selects the variable-speed profile.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EnerfStatus enerf_trajectory_orbit(double radius,
                                        double duration,
                                        double rate,
                                        bool oscillating,
                                        struct EnerfTrajectory **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EnerfStatus enerf_trajectory_load(const char *path, struct EnerfTrajectory **out);

/**
 * # Safety
 * `traj` must be a live handle and `path` a NUL-terminated string.
 */
enum EnerfStatus enerf_trajectory_save(const struct EnerfTrajectory *traj, const char *path);

/**
 * Number of poses, or 0 for null.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t enerf_trajectory_len(const struct EnerfTrajectory *traj);

/**
 * # Safety
 * `traj` must be null or a handle from this library.
 */
void enerf_trajectory_free(struct EnerfTrajectory *traj);

/**
 * Simulates events on the toy camera.
 *
 * # Safety
 * `scene` and `traj` must be live handles and `out` a valid pointer.
 */
enum EnerfStatus enerf_events_simulate(const struct EnerfScene *scene,
                                       const struct EnerfTrajectory *traj,
                                       double c_pos,
                                       double c_neg,
                                       double refractory,
                                       double dt,
                                       struct EnerfEvents **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EnerfStatus enerf_events_load(const char *path, struct EnerfEvents **out);

/**
 * # Safety
 * `events` must be a live handle and `path` a NUL-terminated string.
 */
enum EnerfStatus enerf_events_save(const struct EnerfEvents *events, const char *path);

/**
 * Number of events, or 0 for null.
 *
 * # Safety
 * `events` must be null or a live handle.
 */
size_t enerf_events_len(const struct EnerfEvents *events);

/**
 * Sum of signed thresholds over the events of pixel `(x, y)` in `(t_a, t_b]`.
 *
 * # Safety
 * `events` must be a live handle and `out` a valid pointer.
 */
enum EnerfStatus enerf_events_integrate(const struct EnerfEvents *events,
                                        uint32_t x,
                                        uint32_t y,
                                        double t_a,
                                        double t_b,
                                        double *out);

/**
 * # Safety
 * `events` must be null or a handle from this library.
 */
void enerf_events_free(struct EnerfEvents *events);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EnerfStatus enerf_model_load(const char *path, struct EnerfModel **out);

/**
 * Rendered log-radiance of pixel `(x, y)` at time `t` along `poses`.
 *
 * # Safety
 * `model` and `poses` must be live handles and `out` a valid pointer.
 */
enum EnerfStatus enerf_model_render_pixel(const struct EnerfModel *model,
                                          const struct EnerfTrajectory *poses,
                                          uint32_t x,
                                          uint32_t y,
                                          double t,
                                          uint64_t seed,
                                          double *out);

/**
 * Current `(positive, negative)` contrast thresholds.
 *
 * # Safety
 * `model` must be a live handle; `pos` and `neg` valid pointers.
 */
enum EnerfStatus enerf_model_thresholds(const struct EnerfModel *model, double *pos, double *neg);

/**
 * # Safety
 * `model` must be null or a handle from this library.
 */
void enerf_model_free(struct EnerfModel *model);

/**
 * PSNR in dB of two equally sized buffers of `len` values; 99 when identical.
 *
 * # Safety
 * `a` and `b` must point to `len` readable values; `out` must be valid.
 */
enum EnerfStatus enerf_psnr(const double *a, const double *b, size_t len, double peak, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENERF_H */
