#ifndef CAVLA_H
#define CAVLA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Width of one action: xyz deltas, roll/pitch/yaw deltas, gripper command.
 */
#define CAVLA_ACTION_DIM 7

typedef enum CavlaStatus {
  CAVLA_STATUS_OK = 0,
  CAVLA_STATUS_NULL_POINTER = 1,
  CAVLA_STATUS_INVALID_UTF8 = 2,
  CAVLA_STATUS_INVALID_ARGUMENT = 3,
  CAVLA_STATUS_UNKNOWN_TASK = 4,
  CAVLA_STATUS_IO = 5,
  CAVLA_STATUS_CHECKPOINT = 6,
  CAVLA_STATUS_CONFIG = 7,
  CAVLA_STATUS_BUFFER_TOO_SMALL = 8,
  CAVLA_STATUS_NUMERIC = 9,
  CAVLA_STATUS_INTERNAL = 10,
  CAVLA_STATUS_PANIC = 11,
} CavlaStatus;

/**
 * One closed-loop episode driven by a policy.
 */
typedef struct CavlaEpisode CavlaEpisode;

/**
 * A loaded checkpoint.
 */
typedef struct CavlaPolicy CavlaPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next `cavla_*` call on the same thread.
 */
const char *cavla_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cavla_version(void);

/**
 * Load a checkpoint directory into a new policy handle.
 *
 * # Safety
 * `dir` is a NUL-terminated path; `out` is writable.
 */
enum CavlaStatus cavla_policy_load(const char *dir, struct CavlaPolicy **out);

/**
 * Release a policy handle. Episodes created from it stay valid.
 *
 * # Safety
 * `p` is null or a handle from [`cavla_policy_load`] not yet freed.
 */
void cavla_policy_free(struct CavlaPolicy *p);

/**
 * Actions returned per query (the chunk length K).
 *
 * # Safety
 * `p` is a live policy handle; `out` is writable.
 */
enum CavlaStatus cavla_policy_chunk_len(const struct CavlaPolicy *p, size_t *out);

/**
 * Reset a scene for `task_id` and prepare the episode context (plan,
 * tokens and ROI mask) once.
 *
 * # Safety
 * `p` is a live policy handle; `task_id` is NUL-terminated; `out` is
 * writable.
 */
enum CavlaStatus cavla_episode_new(const struct CavlaPolicy *p,
                                   const char *task_id,
                                   uint64_t seed,
                                   struct CavlaEpisode **out);

/**
 * # Safety
 * `e` is null or a handle from [`cavla_episode_new`] not yet freed.
 */
void cavla_episode_free(struct CavlaEpisode *e);

/**
 * Query the policy on the current observation. Writes `K` actions of
 * [`CAVLA_ACTION_DIM`] floats, row-major, in world units. `out_len`
 * receives the number of floats required, also on
 * [`CavlaStatus::BufferTooSmall`].
 *
 * # Safety
 * `e` is a live episode; `actions` points to `capacity` writable floats;
 * `out_len` is writable.
 */
enum CavlaStatus cavla_episode_query(struct CavlaEpisode *e,
                                     float *actions,
                                     size_t capacity,
                                     size_t *out_len);

/**
 * Apply one action and report whether the task is now solved.
 *
 * # Safety
 * `e` is a live episode; `action` points to [`CAVLA_ACTION_DIM`] floats;
 * `out_success` is writable.
 */
enum CavlaStatus cavla_episode_step(struct CavlaEpisode *e, const float *action, bool *out_success);

/**
 * Actions applied so far.
 *
 * # Safety
 * `e` is a live episode; `out` is writable.
 */
enum CavlaStatus cavla_episode_steps(const struct CavlaEpisode *e, size_t *out);

/**
 * Run a whole episode with the policy, or with the scripted expert when
 * `p` is null.
 *
 * # Safety
 * `p` is null or a live policy handle; `task_id` is NUL-terminated;
 * `out_success` and `out_steps` are writable.
 */
enum CavlaStatus cavla_run_episode(const struct CavlaPolicy *p,
                                   const char *task_id,
                                   uint64_t seed,
                                   size_t max_steps,
                                   bool *out_success,
                                   size_t *out_steps);

/**
 * Rule-based chain-of-thought plan for an instruction, rendered as
 * `"instruction. Steps: s1 → s2 → …"`. Writes a NUL-terminated UTF-8 string
 * into `buf`; `out_len` receives the byte length excluding the NUL, also on
 * [`CavlaStatus::BufferTooSmall`].
 *
 * # Safety
 * `instruction` is NUL-terminated; `buf` points to `capacity` writable
 * bytes; `out_len` is writable.
 */
enum CavlaStatus cavla_decompose(const char *instruction,
                                 char *buf,
                                 size_t capacity,
                                 size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAVLA_H */
