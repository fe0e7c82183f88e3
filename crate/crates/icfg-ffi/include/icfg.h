#ifndef ICFG_H
#define ICFG_H

/* Generated by cbindgen from the icfg-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Threshold calibration objective for [`IcfgOptions`].
typedef enum IcfgObjective {
  // No calibration: the configured prune threshold applies.
  ICFG_OBJECTIVE_NONE = 0,
  // Largest threshold keeping sampled recall at the target.
  ICFG_OBJECTIVE_RECALL = 1,
  // Threshold maximizing sampled F1.
  ICFG_OBJECTIVE_F1 = 2,
} IcfgObjective;

// Status code returned by every fallible call. Mirrors the CLI exit
// codes; [`icfg_last_error_message`] describes the most recent failure on
// the calling thread.
typedef enum IcfgStatus {
  ICFG_STATUS_OK = 0,
  // A required pointer was null or otherwise unusable.
  ICFG_STATUS_INVALID_ARGUMENT = 1,
  // Program, trace, or graph text failed to parse or validate.
  ICFG_STATUS_PARSE_ERROR = 2,
  // Model bytes were rejected or model I/O failed.
  ICFG_STATUS_MODEL_ERROR = 3,
  // A configuration value was out of range.
  ICFG_STATUS_CONFIG_ERROR = 4,
  // Unexpected internal failure.
  ICFG_STATUS_INTERNAL_ERROR = 5,
} IcfgStatus;

// Result of one pipeline run: the pruned graph plus its metadata.
typedef struct IcfgGraph IcfgGraph;

// Trained scorer handle.
typedef struct IcfgModel IcfgModel;

// Parsed program handle.
typedef struct IcfgProgram IcfgProgram;

// Analysis options; obtain defaults with [`icfg_options_default`] and
// override individual fields.
typedef struct IcfgOptions {
  // Backward path height bound, in blocks.
  uint32_t height;
  // Pointer-chase depth for memory sweeps.
  uint32_t sweep_depth;
  // Caller recursion depth for cross-reference resolution.
  uint32_t xref_depth;
  // Refinement budget per callsite, in seconds.
  double timeout_secs;
  // Score adjustment applied by refinement.
  double delta;
  // Argument-score acceptance threshold for callee descriptors.
  double tau_arg;
  // Return-score acceptance threshold for callee descriptors.
  double tau_ret;
  // Threshold used when neither calibration nor an explicit threshold
  // applies.
  double prune_threshold;
  // Fraction of traces sampled for calibration.
  double trace_sample_fraction;
  // Seed for every random choice the run makes.
  uint64_t rng_seed;
  // Charge refinement in deterministic steps instead of wall time.
  bool deterministic_timeout;
  // Calibration objective, applied when traces are supplied.
  enum IcfgObjective objective;
  // Recall floor for the recall objective.
  double target_recall;
  // When set, `explicit_threshold` overrides calibration entirely.
  bool has_explicit_threshold;
  double explicit_threshold;
} IcfgOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, or an empty
// string. The pointer stays valid until the next failing call on the
// same thread.
const char *icfg_last_error_message(void);

// Fill `out` with the default analysis options.
enum IcfgStatus icfg_options_default(struct IcfgOptions *out);

// Parse program text into a handle. On success `*out` owns the program.
enum IcfgStatus icfg_program_parse(const char *text, struct IcfgProgram **out);

// Release a program handle. Null is a no-op.
void icfg_program_free(struct IcfgProgram *p);

// Load a trained scorer from a file path.
enum IcfgStatus icfg_model_load(const char *path, struct IcfgModel **out);

// Release a model handle. Null is a no-op.
void icfg_model_free(struct IcfgModel *m);

// Run the pipeline. `model`, `traces_text`, and `options` may be null:
// scoring then falls back to refinement alone, no metrics or calibration
// happen, and defaults apply respectively. On success `*out` owns the
// result.
enum IcfgStatus icfg_analyze(const struct IcfgProgram *program,
                             const struct IcfgModel *model,
                             const char *traces_text,
                             const struct IcfgOptions *options,
                             struct IcfgGraph **out);

// Release a result handle. Null is a no-op.
void icfg_graph_free(struct IcfgGraph *g);

// Serialize the pruned graph; free the result with [`icfg_string_free`].
// Null on a null handle.
char *icfg_graph_serialize(const struct IcfgGraph *g);

// Render the metrics report; free the result with [`icfg_string_free`].
// Null when the run had no traces or the handle is null.
char *icfg_graph_metrics(const struct IcfgGraph *g);

// The pruning threshold the run settled on; NaN on a null handle.
double icfg_graph_threshold(const struct IcfgGraph *g);

// Number of indirect callsites in the result; 0 on a null handle.
uint64_t icfg_graph_callsites(const struct IcfgGraph *g);

// Number of edges surviving the prune; 0 on a null handle.
uint64_t icfg_graph_edges(const struct IcfgGraph *g);

// Number of callsites whose refinement budget expired; 0 on a null
// handle.
uint64_t icfg_graph_timed_out_count(const struct IcfgGraph *g);

// Release a string returned by this API. Null is a no-op.
void icfg_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ICFG_H */
