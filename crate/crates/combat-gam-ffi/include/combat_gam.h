/* C interface to the combat-gam harmonization library. */

#ifndef COMBAT_GAM_H
#define COMBAT_GAM_H

/* Generated by cbindgen from the combat-gam-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Anything other than OK leaves a
 * description in `cg_last_error`.
 */
typedef enum {
  /**
   * The call succeeded.
   */
  CG_STATUS_OK = 0,
  /**
   * A required pointer was null or an argument was malformed.
   */
  CG_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The inputs were readable but failed a model or cohort check.
   */
  CG_STATUS_VALIDATION = 2,
  /**
   * A file could not be read or written.
   */
  CG_STATUS_IO = 3,
  /**
   * Text failed to parse as CSV or JSON.
   */
  CG_STATUS_PARSE = 4,
  /**
   * An internal invariant broke; the library state is still sound.
   */
  CG_STATUS_PANIC = 5,
} CgStatus;

/**
 * Opaque cohort handle: subjects, covariates, and the feature matrix.
 */
typedef struct CgCohort CgCohort;

/**
 * Opaque fitted-model handle.
 */
typedef struct CgModel CgModel;

/**
 * Opaque evaluation-report handle.
 */
typedef struct CgReport CgReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread. Never null.
 */
const char *cg_last_error(void);

/**
 * Library version as a static string.
 */
const char *cg_version(void);

/**
 * Releases a string returned by this library. Accepts null.
 */
void cg_string_free(char *text);

/**
 * Loads a cohort from a CSV file using the default column names
 * (subject, site, age, sex; all remaining columns are features).
 */
CgStatus cg_cohort_read_csv(const char *path, CgCohort **out);

/**
 * Writes a cohort to a CSV file with the default column names.
 */
CgStatus cg_cohort_write_csv(const CgCohort *cohort, const char *path);

/**
 * Generates a synthetic cohort. `config_json` may be null for the default
 * configuration, or a JSON object understood by the simulator (unknown
 * keys are rejected). When `truth_json` is non-null it receives the
 * ground-truth parameters as JSON; release it with `cg_string_free`.
 */
CgStatus cg_simulate_json(const char *config_json, CgCohort **out, char **truth_json);

void cg_cohort_free(CgCohort *cohort);

/**
 * Number of rows. Zero when the handle is null.
 */
size_t cg_cohort_n_subjects(const CgCohort *cohort);

/**
 * Number of feature columns. Zero when the handle is null.
 */
size_t cg_cohort_n_features(const CgCohort *cohort);

/**
 * Number of distinct sites. Zero when the handle is null.
 */
size_t cg_cohort_n_sites(const CgCohort *cohort);

/**
 * Fits the harmonization model with default settings. `use_pooling`
 * selects whether site parameters are stabilized across features.
 */
CgStatus cg_fit(const CgCohort *cohort, bool use_pooling, CgModel **out);

/**
 * Applies a fitted model, producing a new harmonized cohort.
 */
CgStatus cg_apply(const CgModel *model, const CgCohort *cohort, CgCohort **out);

/**
 * Serializes a model to JSON. Release the string with `cg_string_free`.
 */
CgStatus cg_model_to_json(const CgModel *model, char **out);

/**
 * Restores a model from the JSON produced by `cg_model_to_json`.
 */
CgStatus cg_model_from_json(const char *json, CgModel **out);

void cg_model_free(CgModel *model);

/**
 * Tests every feature for residual site effects at FDR level `q`, with
 * features grouped into families by name prefix.
 */
CgStatus cg_evaluate(const CgCohort *cohort, double q, CgReport **out);

/**
 * Number of features rejected after FDR. Zero when the handle is null.
 */
size_t cg_report_n_rejected(const CgReport *report);

/**
 * Number of features tested. Zero when the handle is null.
 */
size_t cg_report_n_features(const CgReport *report);

/**
 * Serializes a report to JSON. Release the string with `cg_string_free`.
 */
CgStatus cg_report_to_json(const CgReport *report, char **out);

void cg_report_free(CgReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMBAT_GAM_H */
