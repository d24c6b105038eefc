#ifndef HAFL_H
#define HAFL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum HaflStatus {
  HAFL_STATUS_OK = 0,
  HAFL_STATUS_NULL_POINTER = 1,
  HAFL_STATUS_INVALID_UTF8 = 2,
  HAFL_STATUS_INVALID_ARGUMENT = 3,
  HAFL_STATUS_CONFIG = 4,
  HAFL_STATUS_PARSE = 5,
  HAFL_STATUS_IO = 6,
  HAFL_STATUS_PROTOCOL = 7,
  HAFL_STATUS_BUFFER_TOO_SMALL = 8,
  HAFL_STATUS_INTERNAL = 9,
  HAFL_STATUS_PANIC = 10,
} HaflStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct HaflConfig HaflConfig;

/**
 * Opaque single-seed federation, advanced one round at a time.
 */
typedef struct HaflSimulation HaflSimulation;

/**
 * Metrics of one completed round.
 */
typedef struct HaflRoundSummary {
  /**
   * Rounds completed so far, 1-based.
   */
  uint64_t round;
  double global_accuracy;
  double global_loss;
  double mean_client_accuracy;
  uint64_t uploaded_params;
  uint64_t uploaded_bytes;
  uint64_t sampled_clients;
  uint64_t dropped_clients;
} HaflRoundSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *hafl_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hafl_version(void);

/**
 * Bytes uploaded for `selected` rank-1 pairs of a `d × l` adapter.
 */
uint64_t hafl_upload_size(size_t selected, size_t d, size_t l, size_t bytes_per_param);

/**
 * # Safety
 * `out` must be a valid pointer to write a handle into.
 */
enum HaflStatus hafl_config_default(struct HaflConfig **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum HaflStatus hafl_config_from_file(const char *path, struct HaflConfig **out);

/**
 * Parses `key = value` text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum HaflStatus hafl_config_from_str(const char *text, struct HaflConfig **out);

/**
 * Sets one key. The config is re-validated; on failure it is left unchanged.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum HaflStatus hafl_config_set(struct HaflConfig *cfg, const char *key, const char *value);

/**
 * Writes the canonical `key = value` form into `buf` (NUL-terminated).
 * `*needed` receives the required size including the NUL; pass a NULL
 * `buf` to query it.
 *
 * # Safety
 * `cfg` must be a live handle; `buf` must hold `len` bytes or be NULL;
 * `needed` must be valid.
 */
enum HaflStatus hafl_config_to_string(const struct HaflConfig *cfg,
                                      char *buf,
                                      size_t len,
                                      size_t *needed);

/**
 * # Safety
 * `cfg` must be NULL or a handle not yet freed.
 */
void hafl_config_free(struct HaflConfig *cfg);

/**
 * Runs every configured seed and writes `metrics.csv`, `summary.json`
 * and `rounds.jsonl` into `out_dir`.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` a NUL-terminated string.
 */
enum HaflStatus hafl_run(const struct HaflConfig *cfg, const char *out_dir);

/**
 * Builds data and the initial global adapter for one seed of `cfg`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` a valid handle slot.
 */
enum HaflStatus hafl_simulation_new(const struct HaflConfig *cfg,
                                    uint64_t seed,
                                    struct HaflSimulation **out);

/**
 * Runs one round on the calling thread's rayon pool.
 *
 * # Safety
 * `sim` must be a live handle; `out` must be valid.
 */
enum HaflStatus hafl_simulation_step(struct HaflSimulation *sim, struct HaflRoundSummary *out);

/**
 * Copies the current per-rank-1 importance scores into `buf`. `*written`
 * receives the global rank; if `len` is smaller nothing is copied and
 * `HAFL_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `sim` must be a live handle; `buf` must hold `len` doubles or be NULL;
 * `written` must be valid.
 */
enum HaflStatus hafl_simulation_scores(const struct HaflSimulation *sim,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

/**
 * # Safety
 * `sim` must be NULL or a handle not yet freed.
 */
void hafl_simulation_free(struct HaflSimulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HAFL_H */
