#ifndef DOCIR_LAB_H
#define DOCIR_LAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum DlStatus {
  DL_STATUS_OK = 0,
  DL_STATUS_NULL_POINTER = 1,
  DL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The buffer passed in is smaller than the data to write.
   */
  DL_STATUS_BUFFER_TOO_SMALL = 3,
  /**
   * `step` or an observation query before `reset`.
   */
  DL_STATUS_NOT_RESET = 4,
  DL_STATUS_SIMULATION = 5,
  DL_STATUS_CHECKPOINT = 6,
  DL_STATUS_IO = 7,
  DL_STATUS_PANIC = 8,
} DlStatus;

typedef enum DlTask {
  DL_TASK_PICK = 0,
  DL_TASK_PLACE = 1,
} DlTask;

typedef enum DlVariant {
  DL_VARIANT_FIXED = 0,
  DL_VARIANT_VARYING = 1,
} DlVariant;

typedef enum DlView {
  DL_VIEW_BASE = 0,
  DL_VIEW_WRIST = 1,
} DlView;

/**
 * Simulated scene plus its current state.
 */
typedef struct DlEnv DlEnv;

/**
 * A trained policy loaded from a checkpoint.
 */
typedef struct DlPolicy DlPolicy;

/**
 * Outcome of one control step.
 */
typedef struct DlStep {
  double reward;
  bool terminated;
  bool truncated;
  bool success;
} DlStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must point to `len` writable bytes or be null.
 */
size_t dl_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dl_version(void);

size_t dl_proprio_dim(void);

/**
 * Creates an environment with the default geometry. `objects` is the total
 * object count (3, 5, 7 or 9).
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum DlStatus dl_env_new(size_t objects,
                         enum DlVariant variant,
                         enum DlTask task,
                         size_t resolution,
                         struct DlEnv **out);

/**
 * Creates an environment from a JSON scene configuration.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum DlStatus dl_env_from_json(const char *json, enum DlTask task, struct DlEnv **out);

/**
 * Loads the initial-state set Place resets draw from.
 *
 * # Safety
 * `env` must be a live handle and `path` a NUL-terminated string.
 */
enum DlStatus dl_env_load_init_states(struct DlEnv *env, const char *path);

/**
 * Releases an environment. Null is ignored.
 *
 * # Safety
 * `env` must come from `dl_env_new`/`dl_env_from_json` and not be used again.
 */
void dl_env_free(struct DlEnv *env);

/**
 * Starts an episode.
 *
 * # Safety
 * `env` must be a live handle.
 */
enum DlStatus dl_env_reset(struct DlEnv *env, uint64_t seed);

/**
 * Applies `action = [dx, dy, dz, gripper]` (arm components are clamped to
 * [-1, 1]; gripper > 0 closes).
 *
 * # Safety
 * `env` must be live, `action` must point to 4 doubles, `out` may be null.
 */
enum DlStatus dl_env_step(struct DlEnv *env, const double *action, struct DlStep *out);

/**
 * Side length of the square renders.
 *
 * # Safety
 * `env` must be a live handle or null (returns 0).
 */
size_t dl_env_resolution(const struct DlEnv *env);

/**
 * Copies the view's RGB (row-major `H×W×3`, values in [0, 1]) and/or its
 * instance IDs (`H×W`). Either output may be null.
 *
 * # Safety
 * Non-null outputs must hold `rgb_len` floats / `ids_len` integers.
 */
enum DlStatus dl_env_render(const struct DlEnv *env,
                            enum DlView view,
                            float *rgb,
                            size_t rgb_len,
                            uint32_t *ids,
                            size_t ids_len);

/**
 * Copies the proprioceptive vector (`dl_proprio_dim()` floats).
 *
 * # Safety
 * `out` must hold `len` floats.
 */
enum DlStatus dl_env_proprio(const struct DlEnv *env, float *out, size_t len);

/**
 * Writes the three DOCIR group masks (robot, objects of interest,
 * obstacles) of a view as `3×H×W` bytes of 0/1.
 *
 * # Safety
 * `out` must hold `len` bytes.
 */
enum DlStatus dl_env_docir_masks(const struct DlEnv *env,
                                 enum DlView view,
                                 uint8_t *out,
                                 size_t len);

/**
 * Loads a checkpoint written by the training CLI.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid handle slot.
 */
enum DlStatus dl_policy_load(const char *path, struct DlPolicy **out);

/**
 * Releases a policy. Null is ignored.
 *
 * # Safety
 * `policy` must come from `dl_policy_load` and not be used again.
 */
void dl_policy_free(struct DlPolicy *policy);

/**
 * Deterministic action for the environment's current observation, written
 * as `[dx, dy, dz, gripper]` with gripper ±1.
 *
 * # Safety
 * Handles must be live; `action` must hold 4 doubles.
 */
enum DlStatus dl_policy_act(const struct DlPolicy *policy, const struct DlEnv *env, double *action);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOCIR_LAB_H */
