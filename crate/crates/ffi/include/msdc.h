#ifndef MSDC_H
#define MSDC_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsdcStatus {
  MSDC_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  MSDC_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument or configuration value.
   */
  MSDC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unreadable, malformed or mismatched input data.
   */
  MSDC_STATUS_DATA = 3,
  /**
   * Non-finite values, divergence or non-convergence.
   */
  MSDC_STATUS_NUMERICAL = 4,
  /**
   * An output buffer is too small; the required size was written back.
   */
  MSDC_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  MSDC_STATUS_INTERNAL = 6,
} MsdcStatus;

/**
 * Trained model loaded from a checkpoint.
 */
typedef struct MsdcModel MsdcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *msdc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *msdc_version(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum MsdcStatus msdc_model_load(const char *path, struct MsdcModel **out);

/**
 * Releases a handle from [`msdc_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`msdc_model_load`] and not be used afterwards.
 */
void msdc_model_free(struct MsdcModel *model);

/**
 * Number of appliance states M, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t msdc_model_num_states(const struct MsdcModel *model);

/**
 * Input window length w, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t msdc_model_input_len(const struct MsdcModel *model);

/**
 * Disaggregates `len` aggregate samples. `out_power` and `out_states`
 * must each hold `len` elements; either may be null to skip it.
 *
 * # Safety
 * Pointers must be valid for `len` elements.
 */
enum MsdcStatus msdc_model_predict(const struct MsdcModel *model,
                                   const double *aggregate,
                                   uintptr_t len,
                                   double *out_power,
                                   uint32_t *out_states);

/**
 * Mean absolute error in watts.
 *
 * # Safety
 * `pred` and `truth` must be valid for `len` elements; `out` must be valid.
 */
enum MsdcStatus msdc_mae(const double *pred, const double *truth, uintptr_t len, double *out);

/**
 * Signal aggregate error over the whole series.
 *
 * # Safety
 * As for [`msdc_mae`].
 */
enum MsdcStatus msdc_sae(const double *pred, const double *truth, uintptr_t len, double *out);

/**
 * Mean per-period energy error with `period` samples per period.
 *
 * # Safety
 * As for [`msdc_mae`].
 */
enum MsdcStatus msdc_sae_delta(const double *pred,
                               const double *truth,
                               uintptr_t len,
                               uintptr_t period,
                               double *out);

/**
 * Fraction of matching state labels.
 *
 * # Safety
 * `pred` and `truth` must be valid for `len` elements; `out` must be valid.
 */
enum MsdcStatus msdc_state_accuracy(const uint32_t *pred,
                                    const uint32_t *truth,
                                    uintptr_t len,
                                    double *out);

/**
 * Mean-shift state extraction on one appliance's power readings.
 *
 * `bandwidth <= 0` derives it from the data. Centers are written in
 * ascending order to `out_centers` (capacity `centers_cap`) and their
 * count to `*out_num_states`; `out_labels` (length `len`, may be null)
 * receives per-sample state indices. If `centers_cap` is too small,
 * `*out_num_states` still reports the required size.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum MsdcStatus msdc_extract_states(const double *values,
                                    uintptr_t len,
                                    double bandwidth,
                                    double *out_centers,
                                    uintptr_t centers_cap,
                                    uintptr_t *out_num_states,
                                    uint32_t *out_labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSDC_H */
