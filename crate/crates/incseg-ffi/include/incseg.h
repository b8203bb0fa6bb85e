/* C interface to the incseg incremental segmentation laboratory. */

#ifndef INCSEG_H
#define INCSEG_H

/* Generated by cbindgen from incseg-ffi; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum IncsegStatus {
  // Success.
  INCSEG_STATUS_OK = 0,
  // Invalid configuration or argument values.
  INCSEG_STATUS_CONFIG = 1,
  // Missing or malformed data, checkpoints, or domains.
  INCSEG_STATUS_DATA = 2,
  // A verification check failed.
  INCSEG_STATUS_CHECK = 3,
  // Null pointer, non-UTF-8 string, or out-of-range index at the
  // boundary itself.
  INCSEG_STATUS_POINTER = 4,
  // An internal panic was caught; state may be inconsistent.
  INCSEG_STATUS_PANIC = 5,
} IncsegStatus;

// Loaded model plus cached C strings for its names.
typedef struct IncsegModel IncsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *incseg_version(void);

// Message of the most recent failure on this thread; empty string if
// none. Valid until the next failing call on the same thread.
const char *incseg_last_error(void);

// Load a model checkpoint from `path` into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer; on
// success `*out` owns the handle until [`incseg_model_free`].
enum IncsegStatus incseg_model_load(const char *path, struct IncsegModel **out);

// Release a handle obtained from [`incseg_model_load`]. Null is a no-op.
//
// # Safety
// `model` must be a live handle from this library or null; it is dead
// afterwards.
void incseg_model_free(struct IncsegModel *model);

// Number of domains the model was trained over.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum IncsegStatus incseg_model_domain_count(const struct IncsegModel *model, size_t *out);

// Name of domain `t`, or null if out of range. The pointer stays valid
// while the handle lives.
//
// # Safety
// `model` must be a live handle.
const char *incseg_model_domain_name(const struct IncsegModel *model, size_t t);

// Number of classes in domain `t`'s label space.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum IncsegStatus incseg_model_class_count(const struct IncsegModel *model, size_t t, size_t *out);

// Name of class `c` in domain `t`'s label space, or null if out of
// range. The pointer stays valid while the handle lives.
//
// # Safety
// `model` must be a live handle.
const char *incseg_model_class_name(const struct IncsegModel *model, size_t t, size_t c);

// Fraction of parameters shared across domains, in [0, 1].
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum IncsegStatus incseg_model_sharing_ratio(const struct IncsegModel *model, double *out);

// Segment one image along domain `t`'s path.
//
// `image` holds 3*height*width floats in [0, 1], channel-major (all of
// red, then green, then blue, each row-major). `out_labels` receives
// height*width class ids. Extents must be at least 8 and divisible by 4
// so the decoder reproduces the input grid.
//
// # Safety
// `model` must be a live handle; `image` and `out_labels` must point to
// buffers of the stated lengths.
enum IncsegStatus incseg_model_predict(const struct IncsegModel *model,
                                       size_t t,
                                       const float *image,
                                       size_t height,
                                       size_t width,
                                       uint8_t *out_labels);

// Average per-domain mIoU drop of `scores` against `reference`, in
// percentage points; both arrays hold `len` mIoU values in percent.
//
// # Safety
// `scores` and `reference` must point to `len` doubles each; `out` must
// be a valid pointer.
enum IncsegStatus incseg_delta_m(const double *scores,
                                 const double *reference,
                                 size_t len,
                                 double *out);

// Render the synthetic datasets described by the experiment file at
// `config_path` (same format as `incseg gen-domains`).
//
// # Safety
// `config_path` must be a NUL-terminated string.
enum IncsegStatus incseg_generate(const char *config_path);

// Train the experiment described by the file at `config_path`, writing
// checkpoints and reports under its out_dir (same as `incseg run`).
//
// # Safety
// `config_path` must be a NUL-terminated string.
enum IncsegStatus incseg_run(const char *config_path);

// Score the checkpoint at `checkpoint` on `domain`'s validation split
// under `data_root`, writing the domain mIoU (percent) to `out_miou`.
//
// # Safety
// The three strings must be NUL-terminated; `out_miou` must be a valid
// pointer.
enum IncsegStatus incseg_eval(const char *checkpoint,
                              const char *data_root,
                              const char *domain,
                              double *out_miou);

// Run the built-in verification suite. Each PASS/FAIL line is passed to
// `callback` (if non-null) together with `user`; returns
// `INCSEG_STATUS_CHECK` if any check fails.
//
// # Safety
// `callback`, when non-null, must not unwind and must treat the line
// pointer as valid only for the duration of the call.
enum IncsegStatus incseg_selftest(void (*callback)(const char*, void*), void *user);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INCSEG_H */
