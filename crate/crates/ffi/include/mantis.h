#ifndef MANTIS_H
#define MANTIS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MantisStatus {
  MANTIS_STATUS_OK = 0,
  MANTIS_STATUS_NULL_POINTER = 1,
  MANTIS_STATUS_INVALID_ARGUMENT = 2,
  MANTIS_STATUS_SHAPE = 3,
  MANTIS_STATUS_NON_FINITE = 4,
  MANTIS_STATUS_DATA = 5,
  MANTIS_STATUS_IO = 6,
  MANTIS_STATUS_PANIC = 7,
} MantisStatus;

// Opaque network handle.
typedef struct MantisModel MantisModel;

typedef struct MantisMetrics {
  double precision;
  double recall;
  double f1;
  double mcc;
  double iou;
} MantisMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mantis_version(void);

// Message of the last failure on this thread, or NULL. Valid until the next
// failing call on the same thread.
const char *mantis_last_error_message(void);

void mantis_clear_error(void);

// Builds a freshly initialised network from a JSON model config (NULL for the
// defaults) and stores the handle in `*out_model`.
//
// # Safety
// `config_json` must be NULL or a NUL-terminated string; `out_model` must be
// a valid pointer.
enum MantisStatus mantis_model_new(const char *config_json, struct MantisModel **out_model);

// Loads a checkpoint directory into a new handle.
//
// # Safety
// `dir` must be a NUL-terminated string and `out_model` a valid pointer.
enum MantisStatus mantis_model_load(const char *dir, struct MantisModel **out_model);

// Writes the handle's parameters as a checkpoint directory.
//
// # Safety
// `model` must come from this library; `dir` must be a NUL-terminated string.
enum MantisStatus mantis_model_save(const struct MantisModel *model, const char *dir);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` must be NULL or a handle from this library not freed before.
void mantis_model_free(struct MantisModel *model);

// Number of scalar parameters.
//
// # Safety
// `model` must come from this library; `out` must be a valid pointer.
enum MantisStatus mantis_model_num_parameters(const struct MantisModel *model, uintptr_t *out);

// The model config as a newly allocated JSON string; release it with
// [`mantis_string_free`].
//
// # Safety
// `model` must come from this library; `out` must be a valid pointer.
enum MantisStatus mantis_model_config_json(const struct MantisModel *model, char **out);

// # Safety
// `s` must be NULL or a string returned by this library.
void mantis_string_free(char *s);

// Change probability for a batch of image pairs.
//
// Images are row-major `batch × channels × height × width` doubles in
// `[0, 1]`; `out` receives `batch × height × width` values.
//
// # Safety
// Pointers must reference buffers of the stated sizes.
enum MantisStatus mantis_model_predict(const struct MantisModel *model,
                                       const double *img1,
                                       const double *img2,
                                       uintptr_t batch,
                                       uintptr_t channels,
                                       uintptr_t height,
                                       uintptr_t width,
                                       double *out);

// Sliding-window change probability for one `channels × height × width`
// raster pair; `out` receives `height × width` values.
//
// # Safety
// Pointers must reference buffers of the stated sizes.
enum MantisStatus mantis_sliding_inference(const struct MantisModel *model,
                                           const double *raster1,
                                           const double *raster2,
                                           uintptr_t channels,
                                           uintptr_t height,
                                           uintptr_t width,
                                           uintptr_t window,
                                           uintptr_t stride,
                                           double *out);

// Averaged fractal Tanimoto similarity with complement of two vectors in `[0, 1]`.
//
// # Safety
// `p` and `l` must reference `len` doubles; `out` must be a valid pointer.
enum MantisStatus mantis_ftnmt(const double *p,
                               const double *l,
                               uintptr_t len,
                               uint32_t depth,
                               double *out);

// Pixel metrics of two binary masks (nonzero bytes are positive).
//
// # Safety
// `pred` and `gt` must reference `len` bytes; `out` must be a valid pointer.
enum MantisStatus mantis_metrics(const uint8_t *pred,
                                 const uint8_t *gt,
                                 uintptr_t len,
                                 struct MantisMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MANTIS_H */
