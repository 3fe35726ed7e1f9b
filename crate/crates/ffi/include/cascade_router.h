#ifndef CASCADE_ROUTER_H
#define CASCADE_ROUTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of features `cr_estimator_predict` reads and
 * `cr_features_from_ensemble_json` writes.
 */
#define CR_FEATURE_COUNT 6

typedef enum CrStatus {
  CR_STATUS_OK = 0,
  CR_STATUS_NULL_POINTER = 1,
  CR_STATUS_INVALID_UTF8 = 2,
  CR_STATUS_INVALID_ARGUMENT = 3,
  CR_STATUS_PARSE = 4,
  CR_STATUS_IO = 5,
  CR_STATUS_MISSING_ANSWER = 6,
  CR_STATUS_PANIC = 7,
} CrStatus;

typedef enum CrVerdict {
  CR_VERDICT_STOP = 0,
  CR_VERDICT_ESCALATE = 1,
} CrVerdict;

typedef enum CrTaskKind {
  CR_TASK_KIND_CONVERGENT = 0,
  CR_TASK_KIND_OPEN_ENDED = 1,
} CrTaskKind;

/**
 * Opaque handle to a trained failure estimator.
 */
typedef struct CrEstimator CrEstimator;

typedef struct CrPolicy {
  double threshold_t;
  double u_correct;
  double c_esc;
  double oracle_success_prob;
} CrPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a
 * success. Valid until the next `cr_` call on the same thread.
 */
const char *cr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cr_version(void);

/**
 * Parses an estimator from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum CrStatus cr_estimator_load_json(const char *json, struct CrEstimator **out);

/**
 * Loads an estimator from a JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CrStatus cr_estimator_load_file(const char *path, struct CrEstimator **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `est` must be null or a handle from a `cr_estimator_load_*` call that has
 * not been freed.
 */
void cr_estimator_free(struct CrEstimator *est);

/**
 * Stable identifier of the estimator (kind plus content hash). Borrowed
 * from the handle; valid until it is freed.
 *
 * # Safety
 * `est` must be a live handle or null (which yields null).
 */
const char *cr_estimator_id(const struct CrEstimator *est);

/**
 * Failure probability for `CR_FEATURE_COUNT` features in canonical order.
 *
 * # Safety
 * `est` must be a live handle, `features` must point to
 * `CR_FEATURE_COUNT` doubles and `out_p_fail` must be writable.
 */
enum CrStatus cr_estimator_predict(const struct CrEstimator *est,
                                   const double *features,
                                   double *out_p_fail);

/**
 * Writes the `CR_FEATURE_COUNT` features of an ensemble given as JSON
 * (`{"query_id": ..., "outputs": [...]}`).
 *
 * # Safety
 * `ensemble_json` must be a NUL-terminated string and `out_features` must
 * have room for `CR_FEATURE_COUNT` doubles.
 */
enum CrStatus cr_features_from_ensemble_json(const char *ensemble_json, double *out_features);

/**
 * `(1 - p_fail) * u_correct`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CrStatus cr_expected_utility_stop(double p_fail, double u_correct, double *out);

/**
 * `oracle_success_prob * u_correct - c_esc`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CrStatus cr_expected_utility_escalate(double u_correct,
                                           double c_esc,
                                           double oracle_success_prob,
                                           double *out);

/**
 * Failure probability above which escalation is optimal, in [0, 1].
 *
 * # Safety
 * `out` must be writable.
 */
enum CrStatus cr_threshold_from_costs(double u_correct,
                                      double c_esc,
                                      double oracle_success_prob,
                                      double *out);

/**
 * Default policy: threshold 0.70, unit utility, escalation cost 0.3, a
 * perfect oracle.
 */
struct CrPolicy cr_policy_default(void);

/**
 * Escalate iff `p_fail > policy->threshold_t`.
 *
 * # Safety
 * `policy` must point to a `CrPolicy`; `out_verdict` must be writable.
 */
enum CrStatus cr_decide(double p_fail, const struct CrPolicy *policy, enum CrVerdict *out_verdict);

/**
 * Runs features, prediction, answer aggregation and the decision on one
 * ensemble and writes the full decision record as a JSON string.
 *
 * # Safety
 * `est` must be a live handle, `ensemble_json` a NUL-terminated string,
 * `policy` a valid pointer and `out_json` writable. Free the result with
 * `cr_string_free`.
 */
enum CrStatus cr_route_offline(const struct CrEstimator *est,
                               const char *ensemble_json,
                               enum CrTaskKind task_kind,
                               const struct CrPolicy *policy,
                               char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void cr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASCADE_ROUTER_H */
