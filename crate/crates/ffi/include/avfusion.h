#ifndef AVFUSION_H
#define AVFUSION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AvfModelKind {
  AVF_MODEL_KIND_JCA = 0,
  AVF_MODEL_KIND_CONCAT = 1,
  AVF_MODEL_KIND_VANILLA_CA = 2,
} AvfModelKind;

typedef enum AvfStatus {
  AVF_STATUS_OK = 0,
  AVF_STATUS_NULL_POINTER = 1,
  AVF_STATUS_INVALID_ARGUMENT = 2,
  AVF_STATUS_SHAPE_MISMATCH = 3,
  AVF_STATUS_FORMAT = 4,
  AVF_STATUS_IO = 5,
  AVF_STATUS_NUMERIC = 6,
  AVF_STATUS_BUFFER_TOO_SMALL = 7,
  AVF_STATUS_PANIC = 8,
} AvfStatus;

/**
 * Opaque model handle.
 */
typedef struct AvfModel AvfModel;

/**
 * Shape of a model.
 */
typedef struct AvfDims {
  size_t seq_len;
  size_t d_a;
  size_t d_v;
  size_t k;
  size_t outputs;
} AvfDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on this thread.
 */
const char *avf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *avf_version(void);

/**
 * Xavier-initialised model with a linear head of `outputs` (1 or 2).
 */
enum AvfStatus avf_model_new(enum AvfModelKind kind,
                             struct AvfDims dims,
                             uint64_t seed,
                             struct AvfModel **out);

/**
 * Loads a parameter file (`JCAP`, `CONP` or `VCAP`).
 */
enum AvfStatus avf_model_load(const char *path, struct AvfModel **out);

enum AvfStatus avf_model_save(const struct AvfModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 */
void avf_model_free(struct AvfModel *model);

enum AvfStatus avf_model_kind(const struct AvfModel *model, enum AvfModelKind *out);

enum AvfStatus avf_model_dims(const struct AvfModel *model, struct AvfDims *out);

/**
 * Clipped predictions for one sub-sequence. `audio` is `seq_len x d_a`,
 * `visual` is `seq_len x d_v` and `out` receives `seq_len x outputs`.
 */
enum AvfStatus avf_model_predict(const struct AvfModel *model,
                                 const double *audio,
                                 size_t audio_len,
                                 const double *visual,
                                 size_t visual_len,
                                 double *out,
                                 size_t out_len);

/**
 * Concordance correlation coefficient of two length-`n` arrays.
 */
enum AvfStatus avf_ccc(const double *x, const double *y, size_t n, double *out);

/**
 * Normalised log-power spectrogram with the default configuration
 * (64 bands). The signal is resampled from `sample_rate` to 44100 Hz.
 * Writes `rows` (bands) and `cols` (frames); the matrix is copied into
 * `out` when it is non-null and holds `rows * cols` values. Call with a
 * null `out` to query the size.
 */
enum AvfStatus avf_spectrogram(const double *signal,
                               size_t len,
                               uint32_t sample_rate,
                               double *out,
                               size_t out_len,
                               size_t *rows,
                               size_t *cols);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVFUSION_H */
