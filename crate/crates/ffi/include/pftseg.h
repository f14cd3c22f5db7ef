#ifndef PFTSEG_H
#define PFTSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Output stream selector for [`pftseg_decoder_synthesize`].
typedef enum PftsegBranch {
  PFTSEG_BRANCH_SEG = 0,
  PFTSEG_BRANCH_IMG = 1,
} PftsegBranch;

typedef enum PftsegStatus {
  PFTSEG_STATUS_OK = 0,
  PFTSEG_STATUS_NULL_POINTER = 1,
  PFTSEG_STATUS_CONFIG = 2,
  PFTSEG_STATUS_VALIDATION = 3,
  PFTSEG_STATUS_USAGE = 4,
  PFTSEG_STATUS_SHAPE = 5,
  PFTSEG_STATUS_TRAINING = 6,
  PFTSEG_STATUS_PARSE = 7,
  PFTSEG_STATUS_MISSING_ARTIFACT = 8,
  PFTSEG_STATUS_IO = 9,
  PFTSEG_STATUS_PANIC = 10,
} PftsegStatus;

typedef struct PftsegClassifier PftsegClassifier;

typedef struct PftsegDecoder PftsegDecoder;

typedef struct PftsegPalette PftsegPalette;

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *pftseg_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *pftseg_version(void);

// # Safety
// `out` must be a valid pointer to write the handle into.
enum PftsegStatus pftseg_palette_new(size_t k, struct PftsegPalette **out);

// # Safety
// `p` must come from [`pftseg_palette_new`] or be NULL.
void pftseg_palette_free(struct PftsegPalette *p);

// Number of classes, or 0 for NULL.
//
// # Safety
// `p` must be a live palette handle or NULL.
size_t pftseg_palette_k(const struct PftsegPalette *p);

// Copies the `k × 3` colours (RGB in [0, 1], class-major) into `out`.
//
// # Safety
// `out` must hold `3 * k` doubles.
enum PftsegStatus pftseg_palette_colors(const struct PftsegPalette *p, double *out);

// Label map to RGB segmentation map.
//
// # Safety
// `labels` must hold `h * w` bytes and `out` `3 * h * w` doubles.
enum PftsegStatus pftseg_project_labels(const struct PftsegPalette *p,
                                        const uint8_t *labels,
                                        size_t h,
                                        size_t w,
                                        double *out);

// Nearest-colour decoding of an RGB map; ties go to the lower class.
//
// # Safety
// `rgb` must hold `3 * h * w` doubles and `out` `h * w` bytes.
enum PftsegStatus pftseg_unproject(const struct PftsegPalette *p,
                                   const double *rgb,
                                   size_t h,
                                   size_t w,
                                   uint8_t *out);

// `lambda * image + (1 - lambda) * map`.
//
// # Safety
// `image`, `map` and `out` must each hold `3 * h * w` doubles.
enum PftsegStatus pftseg_interpolate(const double *image,
                                     const double *map,
                                     size_t h,
                                     size_t w,
                                     double lambda,
                                     double *out);

// Mean IoU of `pred` against `gt` over `k` classes; classes absent from
// both count as IoU 0. `counts`, when not NULL, receives the `k × k`
// confusion matrix (row = ground truth).
//
// # Safety
// `pred` and `gt` must hold `n` bytes, `counts` `k * k` integers or NULL.
enum PftsegStatus pftseg_miou(const uint8_t *pred,
                              const uint8_t *gt,
                              size_t n,
                              size_t k,
                              double *out_miou,
                              uint64_t *counts);

// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` writable.
enum PftsegStatus pftseg_decoder_load(const char *path, struct PftsegDecoder **out);

// # Safety
// `d` must come from [`pftseg_decoder_load`] or be NULL.
void pftseg_decoder_free(struct PftsegDecoder *d);

// Latent rows, latent width and output resolution.
//
// # Safety
// All pointers must be valid.
enum PftsegStatus pftseg_decoder_shape(const struct PftsegDecoder *d,
                                       size_t *styles,
                                       size_t *latent_dim,
                                       size_t *resolution);

// Renders one branch for latent `w` (`styles × latent_dim`, row-major).
//
// # Safety
// `w` must hold `w_len` doubles and `out` `3 * res * res`.
enum PftsegStatus pftseg_decoder_synthesize(const struct PftsegDecoder *d,
                                            const double *w,
                                            size_t w_len,
                                            enum PftsegBranch branch,
                                            double *out);

// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` writable.
enum PftsegStatus pftseg_classifier_load(const char *path, struct PftsegClassifier **out);

// # Safety
// `c` must come from [`pftseg_classifier_load`] or be NULL.
void pftseg_classifier_free(struct PftsegClassifier *c);

// Number of classes, or 0 for NULL.
//
// # Safety
// `c` must be a live classifier handle or NULL.
size_t pftseg_classifier_k(const struct PftsegClassifier *c);

// Segments latent `w` with the decoder's features and the classifier,
// writing `res × res` labels.
//
// # Safety
// `w` must hold `w_len` doubles and `out` `res * res` bytes.
enum PftsegStatus pftseg_classifier_predict(const struct PftsegClassifier *c,
                                            const struct PftsegDecoder *d,
                                            const double *w,
                                            size_t w_len,
                                            uint8_t *out);

#endif  /* PFTSEG_H */
