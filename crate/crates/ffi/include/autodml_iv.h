#ifndef AUTODML_IV_H
#define AUTODML_IV_H

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. The nonzero library codes match the command-line exit codes.
typedef enum AdmlStatus {
  ADML_STATUS_OK = 0,
  ADML_STATUS_NULL_POINTER = 1,
  ADML_STATUS_CONFIG = 2,
  ADML_STATUS_DATA = 3,
  ADML_STATUS_ESTIMATION = 4,
  ADML_STATUS_PANIC = 5,
} AdmlStatus;

// Estimation target selector for [`adml_fit`].
typedef enum AdmlTarget {
  ADML_TARGET_LATE = 0,
  // Complier means of every covariate.
  ADML_TARGET_CHARACTERISTICS = 1,
  // Counterfactual distribution functions on the supplied grid.
  ADML_TARGET_CDF = 2,
} AdmlTarget;

typedef enum AdmlMethod {
  ADML_METHOD_AUTO = 0,
  ADML_METHOD_PLUGIN = 1,
  ADML_METHOD_KAPPA = 2,
} AdmlMethod;

// Opaque dataset handle.
typedef struct AdmlDataset AdmlDataset;

// Opaque estimate handle.
typedef struct AdmlReport AdmlReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Owned by the library.
const char *adml_last_error(void);

// Library version as a static NUL-terminated string.
const char *adml_version(void);

// Builds a dataset from column arrays; `x` is row-major `n x k`.
//
// # Safety
// Each pointer must reference the stated number of readable doubles.
enum AdmlStatus adml_dataset_new(const double *y,
                                 const double *d,
                                 const double *z,
                                 const double *x,
                                 uintptr_t n,
                                 uintptr_t k,
                                 struct AdmlDataset **out);

// Loads a CSV; every column other than the three named ones is a covariate.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
enum AdmlStatus adml_dataset_load_csv(const char *path,
                                      const char *outcome,
                                      const char *treatment,
                                      const char *instrument,
                                      struct AdmlDataset **out);

// # Safety
// `data` must be NULL or a live handle from this library.
void adml_dataset_free(struct AdmlDataset *data);

// Number of rows, or 0 for NULL.
//
// # Safety
// `data` must be NULL or a live handle.
uintptr_t adml_dataset_rows(const struct AdmlDataset *data);

// Cross-fitted estimate with default tuning. `grid` is read only for
// [`AdmlTarget::Cdf`].
//
// # Safety
// `data` must be a live handle, `grid` must hold `grid_len` doubles, and
// `out` must be writable.
enum AdmlStatus adml_fit(const struct AdmlDataset *data,
                         enum AdmlTarget target,
                         const double *grid,
                         uintptr_t grid_len,
                         enum AdmlMethod method,
                         uintptr_t folds,
                         uint64_t seed,
                         struct AdmlReport **out);

// # Safety
// `report` must be NULL or a live handle from this library.
void adml_report_free(struct AdmlReport *report);

// Number of estimated coordinates, or 0 for NULL.
//
// # Safety
// `report` must be NULL or a live handle.
uintptr_t adml_report_dim(const struct AdmlReport *report);

// Copies the estimates into `out` (capacity `len`, at least the report dimension).
//
// # Safety
// `report` must be a live handle and `out` must hold `len` doubles.
enum AdmlStatus adml_report_theta(const struct AdmlReport *report, double *out, uintptr_t len);

// Copies the standard errors into `out`.
//
// # Safety
// As for [`adml_report_theta`].
enum AdmlStatus adml_report_se(const struct AdmlReport *report, double *out, uintptr_t len);

// Full report as JSON. Release the string with [`adml_string_free`].
//
// # Safety
// `report` must be a live handle and `out` writable.
enum AdmlStatus adml_report_json(const struct AdmlReport *report, char **out);

// # Safety
// `s` must be NULL or a string returned by this library.
void adml_string_free(char *s);

// Population distribution functions of the simulation design at each grid
// point; `beta` and `delta` each receive `len` values.
//
// # Safety
// All three pointers must reference `len` doubles.
enum AdmlStatus adml_truth(const double *grid, uintptr_t len, double *beta, double *delta);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTODML_IV_H */
