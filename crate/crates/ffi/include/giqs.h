#ifndef GIQS_H
#define GIQS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GiqsStatus {
  GIQS_STATUS_OK = 0,
  GIQS_STATUS_NULL_POINTER = 1,
  GIQS_STATUS_INVALID_ARGUMENT = 2,
  GIQS_STATUS_OUT_OF_DOMAIN = 3,
  GIQS_STATUS_BUDGET = 4,
  GIQS_STATUS_CONFIG = 5,
  GIQS_STATUS_NUMERICAL = 6,
  GIQS_STATUS_IO = 7,
  GIQS_STATUS_UTF8 = 8,
  GIQS_STATUS_PANIC = 9,
} GiqsStatus;

/**
 * Opaque model handle.
 */
typedef struct GiqsModelHandle GiqsModelHandle;

/**
 * Opaque report handle: a canonical JSON document plus summary numbers.
 */
typedef struct GiqsReportHandle GiqsReportHandle;

/**
 * Summary of a partition run.
 */
typedef struct GiqsPartitionSummary {
  size_t n_points;
  size_t n_blocks;
  size_t boundary_blocks;
  double dyadic_constant;
  double separation_constant;
  size_t violations;
} GiqsPartitionSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Free with [`giqs_string_free`].
 */
char *giqs_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void giqs_string_free(char *s);

/**
 * Flat torus `T^d` with `h_L(a) = |a|²`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GiqsStatus giqs_model_torus(size_t d, struct GiqsModelHandle **out);

/**
 * Laplacian on the sphere `S^n`, `n >= 2`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GiqsStatus giqs_model_sphere(uint32_t n, struct GiqsModelHandle **out);

/**
 * Laplacian on a compact Lie group: `"su2"` or `"su3"`.
 *
 * # Safety
 * `group` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GiqsStatus giqs_model_lie(const char *group, struct GiqsModelHandle **out);

/**
 * Planar anharmonic oscillator with potential `|x|^{2ℓ}/(2ℓ)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GiqsStatus giqs_model_anharmonic(uint32_t ell, struct GiqsModelHandle **out);

/**
 * # Safety
 * `model` must come from a `giqs_model_*` constructor and not have been freed.
 */
void giqs_model_free(struct GiqsModelHandle *model);

/**
 * Number of actions `d`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t giqs_model_dim(const struct GiqsModelHandle *model);

/**
 * Homogeneity degree of `h_L`, or NaN for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
double giqs_model_degree(const struct GiqsModelHandle *model);

/**
 * Eigenvalue `ω_a = h_L(a)` of the lattice point with integer index `index[0..len]`.
 *
 * # Safety
 * `model` must be a live handle, `index` must point to `len` integers and `out` must be valid.
 */
enum GiqsStatus giqs_model_omega(const struct GiqsModelHandle *model,
                                 const int64_t *index,
                                 size_t len,
                                 double *out);

/**
 * Multiplicity of the joint eigenvalue with integer index `index[0..len]`.
 *
 * # Safety
 * As for [`giqs_model_omega`].
 */
enum GiqsStatus giqs_model_multiplicity(const struct GiqsModelHandle *model,
                                        const int64_t *index,
                                        size_t len,
                                        size_t *out);

/**
 * `h_L` at a real point `a[0..len]`.
 *
 * # Safety
 * `model` must be a live handle, `a` must point to `len` doubles and `out` must be valid.
 */
enum GiqsStatus giqs_model_h(const struct GiqsModelHandle *model,
                             const double *a,
                             size_t len,
                             double *out);

/**
 * Builds the resonance partition of `r_min <= |a| <= r_max` with default checks.
 * Pass NaN for `delta`, `mu` or `r` to use the model defaults.
 *
 * # Safety
 * `model` must be a live handle; `summary` and `report` may each be null.
 */
enum GiqsStatus giqs_partition(const struct GiqsModelHandle *model,
                               double r_min,
                               double r_max,
                               double delta,
                               double mu,
                               double r,
                               struct GiqsPartitionSummary *summary,
                               struct GiqsReportHandle **report);

/**
 * Parses a TOML configuration and runs one subcommand (`"partition"`,
 * `"clusters"`, `"melnikov"`, `"steepness"`, `"spectrum"`, `"normalform"`
 * or `"evolve"`), writing side files to `out_dir` (null: the configured directory).
 * The report of the first seed is returned.
 *
 * # Safety
 * String arguments must be NUL-terminated (or null where allowed) and `report` valid.
 */
enum GiqsStatus giqs_run(const char *config_toml,
                         const char *subcommand,
                         const char *out_dir,
                         struct GiqsReportHandle **report);

/**
 * JSON text of a report, valid until the report is freed.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
const char *giqs_report_json(const struct GiqsReportHandle *report);

/**
 * Number of verification violations recorded in a report.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
uint64_t giqs_report_violations(const struct GiqsReportHandle *report);

/**
 * # Safety
 * `report` must come from this library and not have been freed.
 */
void giqs_report_free(struct GiqsReportHandle *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GIQS_H */
