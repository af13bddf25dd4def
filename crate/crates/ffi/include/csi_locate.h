#ifndef CSI_LOCATE_H
#define CSI_LOCATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The error values match the exit codes of the `csi-locate`
 * command-line tool where one exists.
 */
typedef enum CslStatus {
  CSL_STATUS_OK = 0,
  /**
   * Null pointer, bad length or non-UTF-8 path.
   */
  CSL_STATUS_INVALID_ARGUMENT = 1,
  CSL_STATUS_CONFIG = 2,
  /**
   * Malformed file, dimension mismatch or other data error.
   */
  CSL_STATUS_DATA = 3,
  CSL_STATUS_NUMERICAL = 4,
  /**
   * The stream is still filling its fusion windows; no estimate yet.
   */
  CSL_STATUS_NOT_READY = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  CSL_STATUS_PANIC = 6,
} CslStatus;

/**
 * Loaded measurement dataset.
 */
typedef struct CslDataset CslDataset;

/**
 * Loaded model. Safe to share between threads for read-only calls.
 */
typedef struct CslModel CslModel;

/**
 * Per-UE streaming state bound to a model.
 */
typedef struct CslStream CslStream;

typedef struct CslModelInfo {
  uint32_t num_antennas;
  uint32_t num_subcarriers;
  /**
   * Number of grid points in a probability map.
   */
  uint32_t num_points;
  /**
   * Earlier measurements a stream needs before its first estimate.
   */
  uint32_t history;
} CslModelInfo;

typedef struct CslEstimate {
  double x;
  double y;
  /**
   * Row-major 2x2 covariance.
   */
  double cov[4];
} CslEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next `csl_*` call on the same thread.
 */
const char *csl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *csl_version(void);

/**
 * Loads a checkpoint written by `csi-locate train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CslStatus csl_model_load(const char *path, struct CslModel **out);

/**
 * # Safety
 * `model` must come from `csl_model_load` and not be used afterwards.
 * Streams created from it stay valid.
 */
void csl_model_free(struct CslModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum CslStatus csl_model_info(const struct CslModel *model, struct CslModelInfo *out);

/**
 * Mean distance error of the model on a dataset, over records with enough
 * history for the model's fusion windows.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CslStatus csl_model_evaluate(const struct CslModel *model,
                                  const struct CslDataset *dataset,
                                  double *mde);

/**
 * Starts an empty stream. The stream keeps the model alive.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum CslStatus csl_stream_new(const struct CslModel *model, struct CslStream **out);

/**
 * # Safety
 * `stream` must come from `csl_stream_new` and not be used afterwards.
 */
void csl_stream_free(struct CslStream *stream);

/**
 * Forgets all buffered measurements, e.g. before switching to another UE.
 *
 * # Safety
 * `stream` must be a valid pointer.
 */
enum CslStatus csl_stream_reset(struct CslStream *stream);

/**
 * Feeds one measurement. Returns `Ok` and fills `out` once the fusion
 * windows are full, `NotReady` before that.
 *
 * # Safety
 * `re` and `im` must each point to `num_antennas * num_subcarriers`
 * floats; `stream` and `out` must be valid.
 */
enum CslStatus csl_stream_push(struct CslStream *stream,
                               const float *re,
                               const float *im,
                               uint32_t ue_id,
                               double timestamp,
                               struct CslEstimate *out);

/**
 * Loads a dataset file written by `csi-locate simulate`.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum CslStatus csl_dataset_load(const char *path, struct CslDataset **out);

/**
 * # Safety
 * `dataset` must come from `csl_dataset_load` and not be used afterwards.
 */
void csl_dataset_free(struct CslDataset *dataset);

/**
 * Number of records; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or valid.
 */
size_t csl_dataset_len(const struct CslDataset *dataset);

/**
 * Copies record `index`: channel into `re`/`im` (each `m_r * w` floats),
 * true position into `position[2]`.
 *
 * # Safety
 * Pointers must be valid and the buffers large enough.
 */
enum CslStatus csl_dataset_record(const struct CslDataset *dataset,
                                  size_t index,
                                  float *re,
                                  float *im,
                                  double *position,
                                  uint32_t *ue_id,
                                  double *timestamp);

/**
 * Designed (delay-domain autocorrelation) features of one channel. `out`
 * must hold `8 * num_antennas * num_subcarriers` floats.
 *
 * # Safety
 * `re`/`im` must hold `num_antennas * num_subcarriers` floats and `out`
 * must hold `out_len`.
 */
enum CslStatus csl_designed_features(uint32_t num_antennas,
                                     uint32_t num_subcarriers,
                                     const float *re,
                                     const float *im,
                                     float *out,
                                     size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSI_LOCATE_H */
