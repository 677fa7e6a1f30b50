#ifndef GUARD_LAB_H
#define GUARD_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GuardLabStatus {
  GUARD_LAB_STATUS_OK = 0,
  GUARD_LAB_STATUS_NULL_ARGUMENT = 1,
  GUARD_LAB_STATUS_INVALID_UTF8 = 2,
  GUARD_LAB_STATUS_CONFIG = 3,
  GUARD_LAB_STATUS_NUMERIC = 4,
  GUARD_LAB_STATUS_BUFFER_TOO_SMALL = 5,
  GUARD_LAB_STATUS_PANIC = 6,
} GuardLabStatus;

// Parsed experiment configuration.
typedef struct GuardLabExperiment GuardLabExperiment;

// Generated data with its fine-tuned parameters.
typedef struct GuardLabInstance GuardLabInstance;

// Rows of an unlearning run.
typedef struct GuardLabReport GuardLabReport;

// Outcome of the theory checks.
typedef struct GuardLabVerification GuardLabVerification;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The caller
// owns the returned string.
char *guard_lab_last_error(void);

// # Safety
// `s` must be NULL or a string returned by this library.
void guard_lab_string_free(char *s);

// Parses a TOML experiment configuration.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum GuardLabStatus guard_lab_experiment_from_toml(const char *toml,
                                                   struct GuardLabExperiment **out);

// # Safety
// `exp` must be a valid experiment handle.
enum GuardLabStatus guard_lab_experiment_set_seed(struct GuardLabExperiment *exp, uint64_t seed);

// # Safety
// `exp` must be NULL or a handle from [`guard_lab_experiment_from_toml`].
void guard_lab_experiment_free(struct GuardLabExperiment *exp);

// Generates the data and fine-tunes the starting parameters.
//
// # Safety
// `exp` must be a valid experiment handle; `out` must be writable.
enum GuardLabStatus guard_lab_instance_prepare(const struct GuardLabExperiment *exp,
                                               struct GuardLabInstance **out);

// # Safety
// `inst` must be NULL or a handle from [`guard_lab_instance_prepare`].
void guard_lab_instance_free(struct GuardLabInstance *inst);

// Writes forget count, retain count and parameter count.
//
// # Safety
// `inst` must be a valid instance handle; outputs must be writable.
enum GuardLabStatus guard_lab_instance_shape(const struct GuardLabInstance *inst,
                                             size_t *n_forget,
                                             size_t *n_retain,
                                             size_t *n_params);

// Copies the fine-tuned parameters into `buf` (at least `n_params` values).
//
// # Safety
// `inst` must be a valid instance handle; `buf` must hold `len` doubles.
enum GuardLabStatus guard_lab_instance_theta0(const struct GuardLabInstance *inst,
                                              double *buf,
                                              size_t len);

// Copies the per-forget-sample alignment scores into `buf` (at least
// `n_forget` values).
//
// # Safety
// `inst` must be a valid instance handle; `buf` must hold `len` doubles.
enum GuardLabStatus guard_lab_instance_forget_scores(const struct GuardLabInstance *inst,
                                                     double *buf,
                                                     size_t len);

// Retention-aware weights for `n` scores at temperature `tau`, written to
// `out` (`n` values).
//
// # Safety
// `scores` must hold `n` doubles and `out` must have room for `n`.
enum GuardLabStatus guard_lab_weights(const double *scores, size_t n, double tau, double *out);

// Runs every configured unlearning entry on the instance.
//
// # Safety
// Handles must be valid; `out` must be writable.
enum GuardLabStatus guard_lab_run(const struct GuardLabExperiment *exp,
                                  const struct GuardLabInstance *inst,
                                  struct GuardLabReport **out);

// # Safety
// `report` must be a valid report handle.
size_t guard_lab_report_len(const struct GuardLabReport *report);

// Forget and retain loss after run `index`.
//
// # Safety
// `report` must be a valid report handle; outputs must be writable.
enum GuardLabStatus guard_lab_report_losses(const struct GuardLabReport *report,
                                            size_t index,
                                            double *loss_forget,
                                            double *loss_retain);

// Results as CSV text; NULL if `report` is NULL. The caller owns the string.
//
// # Safety
// `report` must be NULL or a valid report handle.
char *guard_lab_report_csv(const struct GuardLabReport *report);

// # Safety
// `report` must be NULL or a handle from [`guard_lab_run`].
void guard_lab_report_free(struct GuardLabReport *report);

// Runs the theory checks on the instance.
//
// # Safety
// Handles must be valid; `out` must be writable.
enum GuardLabStatus guard_lab_verify(const struct GuardLabExperiment *exp,
                                     const struct GuardLabInstance *inst,
                                     struct GuardLabVerification **out);

// Counts of passed, failed and skipped checks.
//
// # Safety
// `v` must be a valid verification handle; outputs must be writable.
enum GuardLabStatus guard_lab_verification_counts(const struct GuardLabVerification *v,
                                                  size_t *passed,
                                                  size_t *failed,
                                                  size_t *skipped);

// One line per check; the caller owns the string.
//
// # Safety
// `v` must be NULL or a valid verification handle.
char *guard_lab_verification_render(const struct GuardLabVerification *v);

// # Safety
// `v` must be NULL or a handle from [`guard_lab_verify`].
void guard_lab_verification_free(struct GuardLabVerification *v);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GUARD_LAB_H */
