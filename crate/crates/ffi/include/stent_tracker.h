#ifndef STENT_TRACKER_H
#define STENT_TRACKER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum StStatus {
  ST_STATUS_OK = 0,
  ST_STATUS_NULL_POINTER = 1,
  ST_STATUS_INVALID_UTF8 = 2,
  ST_STATUS_INVALID_ARGUMENT = 3,
  ST_STATUS_INVALID_CONFIG = 4,
  ST_STATUS_PARSE = 5,
  ST_STATUS_IO = 6,
  ST_STATUS_DIMENSION_MISMATCH = 7,
  ST_STATUS_DEGENERATE_DATASET = 8,
  ST_STATUS_OUT_OF_RANGE = 9,
  ST_STATUS_PANIC = 10,
} StStatus;

/**
 * Trained object classifier and graph network.
 */
typedef struct StModels StModels;

/**
 * A frame sequence, with ground truth when it was simulated or loaded with one.
 */
typedef struct StSequence StSequence;

/**
 * Per-frame stent selections.
 */
typedef struct StTrack StTrack;

/**
 * One frame of a track. Coordinates are pixels; fields other than
 * `present` are zero when `present` is 0.
 */
typedef struct StSelection {
  int32_t present;
  double x0;
  double y0;
  double x1;
  double y1;
  double prob;
} StSelection;

/**
 * Detection counts and metrics. `mae` and `rmse` are NaN when no landmark matched.
 */
typedef struct StEvalResult {
  size_t tp;
  size_t fp;
  size_t fn_;
  size_t tn;
  double precision;
  double recall;
  double f1;
  double accuracy;
  double mae;
  double rmse;
  size_t matched_landmarks;
} StEvalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *st_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next `st_*` call on the same thread.
 */
const char *st_last_error_message(void);

/**
 * Simulates a sequence. `config` holds optional `key=value` lines with
 * simulator keys (`frames`, `noise_sigma`, …) and may be NULL; `seed`
 * replaces the configured seed.
 *
 * # Safety
 * `config` is NULL or NUL-terminated; `out` points to writable storage.
 */
enum StStatus st_sequence_simulate(const char *config, uint64_t seed, struct StSequence **out);

/**
 * Loads `frame_*.pgm` (and `ground_truth.jsonl` if present) from `dir`.
 *
 * # Safety
 * `dir` is NUL-terminated; `out` points to writable storage.
 */
enum StStatus st_sequence_load_dir(const char *dir, struct StSequence **out);

/**
 * Writes the sequence in the layout [`st_sequence_load_dir`] reads.
 *
 * # Safety
 * `seq` is a live handle; `dir` is NUL-terminated.
 */
enum StStatus st_sequence_save_dir(const struct StSequence *seq, const char *dir);

/**
 * # Safety
 * `seq` is a live handle; `out` points to writable storage.
 */
enum StStatus st_sequence_frame_count(const struct StSequence *seq, size_t *out);

/**
 * # Safety
 * `seq` is NULL or a handle not yet freed.
 */
void st_sequence_free(struct StSequence *seq);

/**
 * Loads `mlp.txt` and `gcn.txt` from `dir`.
 *
 * # Safety
 * `dir` is NUL-terminated; `out` points to writable storage.
 */
enum StStatus st_models_load(const char *dir, struct StModels **out);

/**
 * # Safety
 * `models` is NULL or a handle not yet freed.
 */
void st_models_free(struct StModels *models);

/**
 * Runs the full tracker. `config` holds optional `key=value` lines with the
 * command-line prefixes (`detect.`, `propose.`, `track.`) and may be NULL.
 *
 * # Safety
 * `seq` and `models` are live handles; `config` is NULL or NUL-terminated;
 * `out` points to writable storage.
 */
enum StStatus st_track_sequence(const struct StSequence *seq,
                                const struct StModels *models,
                                const char *config,
                                struct StTrack **out);

/**
 * # Safety
 * `track` is a live handle; `out` points to writable storage.
 */
enum StStatus st_track_len(const struct StTrack *track, size_t *out);

/**
 * Selection of frame `t`; `ST_STATUS_OUT_OF_RANGE` past the end.
 *
 * # Safety
 * `track` is a live handle; `out` points to writable storage.
 */
enum StStatus st_track_get(const struct StTrack *track, size_t t, struct StSelection *out);

/**
 * # Safety
 * `track` is NULL or a handle not yet freed.
 */
void st_track_free(struct StTrack *track);

/**
 * Scores `track` against the ground truth of `seq` at matching `radius` px.
 *
 * # Safety
 * `track` and `seq` are live handles; `out` points to writable storage.
 */
enum StStatus st_evaluate(const struct StTrack *track,
                          const struct StSequence *seq,
                          double radius,
                          struct StEvalResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STENT_TRACKER_H */
