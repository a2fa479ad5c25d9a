#ifndef ALCHEMY_H
#define ALCHEMY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AlchemyStatus {
  ALCHEMY_STATUS_OK = 0,
  ALCHEMY_STATUS_NULL_POINTER = 1,
  ALCHEMY_STATUS_INVALID_CONFIG = 2,
  ALCHEMY_STATUS_INVALID_ACTION = 3,
  ALCHEMY_STATUS_EPISODE_COMPLETE = 4,
  ALCHEMY_STATUS_BUFFER_TOO_SMALL = 5,
  ALCHEMY_STATUS_NOT_RESET = 6,
  ALCHEMY_STATUS_MODEL_ERROR = 7,
  ALCHEMY_STATUS_PLAN_ERROR = 8,
  ALCHEMY_STATUS_PANIC = 9,
} AlchemyStatus;

typedef enum AlchemyScale {
  ALCHEMY_SCALE_FULL = 0,
  ALCHEMY_SCALE_REDUCED = 1,
} AlchemyScale;

typedef enum AlchemyModelKind {
  /**
   * Knows the episode's hidden chemistry.
   */
  ALCHEMY_MODEL_KIND_ORACLE = 0,
  /**
   * Exact posterior over chemistries; reduced scale only.
   */
  ALCHEMY_MODEL_KIND_BELIEF = 1,
} AlchemyModelKind;

/**
 * Environment episode plus the history a planner needs.
 */
typedef struct AlchemyEnv AlchemyEnv;

typedef struct AlchemyPlanner AlchemyPlanner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates an environment. `config_toml` may be null, in which case the
 * preset for `scale` is used unchanged; otherwise its keys override the
 * preset.
 *
 * # Safety
 * `config_toml` must be null or a valid NUL-terminated string; `out` must
 * be a valid pointer.
 */
enum AlchemyStatus alchemy_env_new(const char *config_toml,
                                   enum AlchemyScale scale,
                                   struct AlchemyEnv **out);

/**
 * # Safety
 * `env` must be null or a handle from [`alchemy_env_new`] not yet freed.
 */
void alchemy_env_free(struct AlchemyEnv *env);

/**
 * # Safety
 * `env` must be a live handle.
 */
size_t alchemy_env_observation_dim(const struct AlchemyEnv *env);

/**
 * # Safety
 * `env` must be a live handle.
 */
size_t alchemy_env_num_actions(const struct AlchemyEnv *env);

/**
 * Starts a new episode from `seed`.
 *
 * # Safety
 * `env` must be a live handle.
 */
enum AlchemyStatus alchemy_env_reset(struct AlchemyEnv *env, uint64_t seed);

/**
 * Writes the current observation into `buf` (length `len`).
 *
 * # Safety
 * `env` must be a live handle and `buf` must point to `len` writable floats.
 */
enum AlchemyStatus alchemy_env_observe(const struct AlchemyEnv *env, float *buf, size_t len);

/**
 * Takes action index `action`; writes the next observation, the reward and
 * whether the episode ended. `obs_buf` may be null to skip the observation.
 *
 * # Safety
 * `env` must be a live handle; non-null pointers must be valid for writes.
 */
enum AlchemyStatus alchemy_env_step(struct AlchemyEnv *env,
                                    uint32_t action,
                                    float *obs_buf,
                                    size_t obs_len,
                                    double *reward,
                                    bool *done);

/**
 * Creates a planner. Search parameters take their standard values except
 * for the number of expansions.
 *
 * # Safety
 * `env` must be a live handle; `out` must be a valid pointer.
 */
enum AlchemyStatus alchemy_planner_new(const struct AlchemyEnv *env,
                                       enum AlchemyModelKind kind,
                                       uint32_t num_expansions,
                                       uint64_t seed,
                                       struct AlchemyPlanner **out);

/**
 * # Safety
 * `planner` must be null or a live handle.
 */
void alchemy_planner_free(struct AlchemyPlanner *planner);

/**
 * Searches from the environment's current history and writes the chosen
 * action. If `probs` is non-null it receives the root action
 * probabilities (`probs_len` must be at least the number of actions).
 *
 * # Safety
 * Handles must be live; non-null pointers must be valid for writes.
 */
enum AlchemyStatus alchemy_plan_step(struct AlchemyPlanner *planner,
                                     const struct AlchemyEnv *env,
                                     uint32_t *action,
                                     double *probs,
                                     size_t probs_len);

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length in bytes (excluding the terminator).
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t alchemy_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *alchemy_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALCHEMY_H */
