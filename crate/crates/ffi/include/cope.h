#ifndef COPE_H
#define COPE_H

/* Generated by cbindgen from the cope-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a fallible call. Anything other than `OK` leaves the output
// arguments untouched and records a message for
// [`cope_last_error_message`].
typedef enum CopeStatus {
  COPE_STATUS_OK = 0,
  // A required pointer argument was null.
  COPE_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  COPE_STATUS_UTF8 = 2,
  // An argument or configuration value was rejected.
  COPE_STATUS_INVALID_ARGUMENT = 3,
  // A JSON document failed to parse.
  COPE_STATUS_JSON = 4,
  // The computation itself failed (singular system, empty data, ...).
  COPE_STATUS_RUNTIME = 5,
  // An internal invariant was violated; the library state is still
  // usable but the call did nothing.
  COPE_STATUS_PANIC = 6,
} CopeStatus;

// A batch of observed trajectories from the built-in tabular benchmark.
typedef struct CopeDataset CopeDataset;

// A point estimate with its confidence interval.
typedef struct CopeEstimate CopeEstimate;

// Results of a replication experiment: the per-replication rows and the
// aggregated summary, both as CSV documents.
typedef struct CopeExperiment CopeExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; never null, never
// freed.
const char *cope_version(void);

// Description of the most recent failure on the calling thread, or an
// empty string if nothing failed yet. The pointer stays valid until the
// next failing call on the same thread; do not free it.
const char *cope_last_error_message(void);

// Draws a dataset of `n_trajectories` trajectories of length `horizon`
// from the built-in tabular benchmark under its behavior policy,
// discarding `burn_in` warm-up steps per trajectory. The draw is a pure
// function of the arguments; the same seed always yields the same data.
//
// On success writes a handle to `out`; release it with
// [`cope_dataset_free`].
//
// # Safety
// `out` must be a valid pointer.
enum CopeStatus cope_toy_dataset_generate(size_t n_trajectories,
                                          size_t horizon,
                                          size_t burn_in,
                                          uint64_t seed,
                                          struct CopeDataset **out);

// Number of trajectories in the dataset; 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle from this library.
size_t cope_dataset_n_trajectories(const struct CopeDataset *dataset);

// Total number of recorded transitions in the dataset; 0 for a null
// handle.
//
// # Safety
// `dataset` must be null or a live handle from this library.
size_t cope_dataset_total_steps(const struct CopeDataset *dataset);

// Releases a dataset handle. Null is accepted and ignored.
//
// # Safety
// `dataset` must be null or a live handle, and must not be used again
// after this call.
void cope_dataset_free(struct CopeDataset *dataset);

// Estimates the discounted value of a target policy on the built-in
// tabular benchmark from an observed dataset: fits every nuisance on the
// dataset, then evaluates the mediated doubly-robust estimator with a
// two-sided `1 - alpha` confidence interval.
//
// `policy` selects the evaluated policy, `"target"` or `"uniform"`.
// `nuisance_json` may be null for default fitting knobs, or a JSON object
// such as `{"laplace_alpha": 0.5}`; omitted fields keep their defaults.
//
// On success writes a handle to `out`; release it with
// [`cope_estimate_free`].
//
// # Safety
// `dataset` must be a live handle, `policy` a valid NUL-terminated
// string, `nuisance_json` null or a valid NUL-terminated string, and
// `out` a valid pointer.
enum CopeStatus cope_toy_evaluate(const struct CopeDataset *dataset,
                                  const char *policy,
                                  double gamma,
                                  double alpha,
                                  const char *nuisance_json,
                                  struct CopeEstimate **out);

// Point estimate of the discounted value; NaN for a null handle.
//
// # Safety
// `estimate` must be null or a live handle from this library.
double cope_estimate_value(const struct CopeEstimate *estimate);

// Standard error of the estimate; NaN for a null handle.
//
// # Safety
// `estimate` must be null or a live handle from this library.
double cope_estimate_se(const struct CopeEstimate *estimate);

// Writes the confidence interval endpoints to `lower` and `upper`.
//
// # Safety
// `estimate` must be a live handle; `lower` and `upper` must be valid
// pointers.
enum CopeStatus cope_estimate_ci(const struct CopeEstimate *estimate, double *lower, double *upper);

// Releases an estimate handle. Null is accepted and ignored.
//
// # Safety
// `estimate` must be null or a live handle, and must not be used again
// after this call.
void cope_estimate_free(struct CopeEstimate *estimate);

// Runs a full replication experiment from a JSON configuration — the
// same document accepted by `cope experiment --config`. Blocks until
// every replication finishes.
//
// On success writes a handle to `out`; release it with
// [`cope_experiment_free`].
//
// # Safety
// `config_json` must be a valid NUL-terminated string and `out` a valid
// pointer.
enum CopeStatus cope_experiment_run_json(const char *config_json, struct CopeExperiment **out);

// Per-replication results as a CSV document. The pointer borrows from
// the handle: it stays valid until [`cope_experiment_free`] and must not
// be freed. Null for a null handle.
//
// # Safety
// `experiment` must be null or a live handle from this library.
const char *cope_experiment_rows_csv(const struct CopeExperiment *experiment);

// Aggregated per-design summary as a CSV document, borrowed from the
// handle exactly like [`cope_experiment_rows_csv`].
//
// # Safety
// `experiment` must be null or a live handle from this library.
const char *cope_experiment_summary_csv(const struct CopeExperiment *experiment);

// Writes the ground-truth target value used for the experiment's error
// columns and its Monte Carlo standard error (0 when the truth is
// exact).
//
// # Safety
// `experiment` must be a live handle; `truth` and `truth_se` must be
// valid pointers.
enum CopeStatus cope_experiment_truth(const struct CopeExperiment *experiment,
                                      double *truth,
                                      double *truth_se);

// Releases an experiment handle (and the CSV strings borrowed from it).
// Null is accepted and ignored.
//
// # Safety
// `experiment` must be null or a live handle, and must not be used again
// after this call.
void cope_experiment_free(struct CopeExperiment *experiment);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COPE_H */
