#ifndef RELDYN_H
#define RELDYN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RdStatus {
  RD_STATUS_OK = 0,
  RD_STATUS_NULL_POINTER = 1,
  RD_STATUS_INVALID_UTF8 = 2,
  RD_STATUS_INVALID_ARGUMENT = 3,
  RD_STATUS_IO = 4,
  RD_STATUS_PARSE = 5,
  RD_STATUS_VERSION = 6,
  RD_STATUS_CHECKPOINT = 7,
  RD_STATUS_UNKNOWN_OBJECT = 8,
  RD_STATUS_INTERNAL = 9,
} RdStatus;

/**
 * A loaded model.
 */
typedef struct RdModel RdModel;

/**
 * A parsed scene.
 */
typedef struct RdScene RdScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty when none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *rd_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *rd_version(void);

/**
 * Loads an `RDGNN-CKPT-1` checkpoint.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum RdStatus rd_model_load(const char *path, struct RdModel **out);

/**
 * # Safety
 * `model` is null or a handle from [`rd_model_load`] not yet freed.
 */
void rd_model_free(struct RdModel *model);

/**
 * Parses scene JSON.
 *
 * # Safety
 * `json` is a NUL-terminated string; `out` is writable.
 */
enum RdStatus rd_scene_from_json(const char *json, struct RdScene **out);

/**
 * # Safety
 * `scene` is null or a handle from [`rd_scene_from_json`] not yet freed.
 */
void rd_scene_free(struct RdScene *scene);

/**
 * Ground-truth relations of the visible objects, as relation-matrix JSON.
 *
 * # Safety
 * `scene` is a live handle; `out` is writable.
 */
enum RdStatus rd_scene_label(const struct RdScene *scene, char **out);

/**
 * Detected relation probabilities for every ordered pair, as JSON.
 *
 * # Safety
 * `model` and `scene` are live handles; `out` is writable.
 */
enum RdStatus rd_model_detect(const struct RdModel *model, const struct RdScene *scene, char **out);

/**
 * Plans the skeleton, executes it in the simulator and reports JSON with
 * the plan, the applied actions and the per-step verdicts.
 *
 * # Safety
 * `model` and `scene` are live handles; `skeleton_json` is a
 * NUL-terminated string; `cem_json` is null (defaults) or a NUL-terminated
 * string; `out` is writable.
 */
enum RdStatus rd_model_plan(const struct RdModel *model,
                            const struct RdScene *scene,
                            const char *skeleton_json,
                            const char *cem_json,
                            uint64_t seed,
                            char **out);

/**
 * # Safety
 * `s` is null or a string returned by this library not yet freed.
 */
void rd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELDYN_H */
