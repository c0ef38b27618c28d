#ifndef CHIEFRAY_H
#define CHIEFRAY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a call. The non-zero values match the exit codes of the
// `chiefray` command line tool, plus two that only arise here.
typedef enum ChiefrayStatus {
  CHIEFRAY_STATUS_OK = 0,
  // Null pointer, bad UTF-8 or an argument out of range.
  CHIEFRAY_STATUS_INVALID_ARGUMENT = 1,
  // Invalid configuration, malformed file or stale checksum.
  CHIEFRAY_STATUS_INVALID_INPUT = 2,
  // A stage could not complete (degenerate geometry, no blobs, ...).
  CHIEFRAY_STATUS_FAILED = 3,
  CHIEFRAY_STATUS_IO = 4,
  // A bug: the library panicked.
  CHIEFRAY_STATUS_INTERNAL = 5,
} ChiefrayStatus;

// Simulated bench description.
typedef struct ChiefrayBench ChiefrayBench;

// Calibration result.
typedef struct ChiefrayReport ChiefrayReport;

typedef struct ChiefrayRunOptions {
  // Gaussian noise on measured scanner points (scan px).
  double noise_sigma;
  // Largest fraction of sets the robust loop may exclude, in [0, 0.2].
  double max_exclusion;
  // Additive sensor noise as a fraction of the white level.
  double irradiance_noise;
  // Used only when `use_seed` is set; otherwise the bench seed applies.
  uint64_t seed;
  bool use_seed;
  // Use blob-centre correspondences instead of chief rays.
  bool naive_chief;
  // Also write every pattern and scan frame.
  bool keep_stack;
} ChiefrayRunOptions;

typedef struct ChiefrayIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
} ChiefrayIntrinsics;

// Dot-error statistics on the evaluation board (mm).
typedef struct ChiefrayEvalSummary {
  size_t count;
  double mean_mm;
  double std_mm;
  double max_mm;
} ChiefrayEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into the library from this thread.
const char *chiefray_last_error(void);

// Library version as a static string.
const char *chiefray_version(void);

struct ChiefrayRunOptions chiefray_run_options_default(void);

// The default tilted-scanner bench.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum ChiefrayStatus chiefray_bench_default(struct ChiefrayBench **out);

// The default bench with the scanner parallel to the lens.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum ChiefrayStatus chiefray_bench_parallel(struct ChiefrayBench **out);

// Parses and validates a bench from JSON text.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum ChiefrayStatus chiefray_bench_from_json(const char *json, struct ChiefrayBench **out);

// Serializes a bench as JSON. Release the string with
// [`chiefray_string_free`].
//
// # Safety
// `bench` must be a live handle; `out` must be writable.
enum ChiefrayStatus chiefray_bench_to_json(const struct ChiefrayBench *bench, char **out);

// Intrinsics of the simulated projector.
//
// # Safety
// `bench` must be a live handle; `out` must be writable.
enum ChiefrayStatus chiefray_bench_ground_truth(const struct ChiefrayBench *bench,
                                                struct ChiefrayIntrinsics *out);

// Total pinholes over all masks.
//
// # Safety
// `bench` must be a live handle or null (returns 0).
size_t chiefray_bench_pinhole_count(const struct ChiefrayBench *bench);

// # Safety
// `bench` must come from this library and not be used afterwards.
void chiefray_bench_free(struct ChiefrayBench *bench);

// Simulates, decodes and calibrates the bench, writing every artifact and
// a manifest into `out_dir` (created if needed). `options` may be null for
// defaults.
//
// # Safety
// `bench` must be a live handle, `out_dir` a NUL-terminated string,
// `options` null or valid, and `out` writable.
enum ChiefrayStatus chiefray_run(const struct ChiefrayBench *bench,
                                 const char *out_dir,
                                 const struct ChiefrayRunOptions *options,
                                 struct ChiefrayReport **out);

// Loads a `report.json` written by a run.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ChiefrayStatus chiefray_report_load(const char *path, struct ChiefrayReport **out);

// # Safety
// `report` must be a live handle; `out` must be writable.
enum ChiefrayStatus chiefray_report_intrinsics(const struct ChiefrayReport *report,
                                               struct ChiefrayIntrinsics *out);

// Mean reprojection errors: projector px and scanner px. Either output
// may be null.
//
// # Safety
// `report` must be a live handle; non-null outputs must be writable.
enum ChiefrayStatus chiefray_report_mrpe(const struct ChiefrayReport *report,
                                         double *projector_px,
                                         double *scanner_px);

// Copies up to `capacity` excluded pinhole ids (in exclusion order) into
// `ids` and returns the total number excluded. Pass `ids = NULL` to query
// the count.
//
// # Safety
// `report` must be a live handle or null (returns 0); `ids` must hold
// `capacity` elements when non-null.
size_t chiefray_report_excluded(const struct ChiefrayReport *report, size_t *ids, size_t capacity);

// Dot errors of the report's intrinsics on the standard evaluation board,
// against the bench's true projector.
//
// # Safety
// Both handles must be live; `out` must be writable.
enum ChiefrayStatus chiefray_report_evaluate(const struct ChiefrayReport *report,
                                             const struct ChiefrayBench *bench,
                                             struct ChiefrayEvalSummary *out);

// # Safety
// `report` must come from this library and not be used afterwards.
void chiefray_report_free(struct ChiefrayReport *report);

// # Safety
// `s` must be a string returned by this library, or null.
void chiefray_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHIEFRAY_H */
