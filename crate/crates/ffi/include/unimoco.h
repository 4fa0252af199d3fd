#ifndef UNIMOCO_H
#define UNIMOCO_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum UmcStatus {
  UMC_STATUS_OK = 0,
  UMC_STATUS_NULL_POINTER = 1,
  UMC_STATUS_INVALID_ARGUMENT = 2,
  UMC_STATUS_IO = 3,
  UMC_STATUS_CHECKPOINT = 4,
  UMC_STATUS_DIMENSION = 5,
  UMC_STATUS_DEGENERATE = 6,
  UMC_STATUS_PANIC = 7,
} UmcStatus;

/**
 * A loaded model.
 */
typedef struct UmcModel UmcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *umc_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t umc_last_error(char *buf, size_t cap);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UmcStatus umc_model_load(const char *path, struct UmcModel **out);

/**
 * Releases a handle from [`umc_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle, freed at most once.
 */
void umc_model_free(struct UmcModel *model);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t umc_model_dim(const struct UmcModel *model);

/**
 * Image geometry expected by [`umc_embed`]: patches per image and values
 * per patch.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be writable.
 */
enum UmcStatus umc_model_image_shape(const struct UmcModel *model,
                                     size_t *patches,
                                     size_t *patch_dim);

/**
 * Embeds one input into `out` (`out_len` must equal the model width). The
 * image is `patches * patch_dim` row-major values, or null for text only.
 *
 * # Safety
 * Every non-null pointer must be valid for its stated length.
 */
enum UmcStatus umc_embed(const struct UmcModel *model,
                         const uint32_t *instruction,
                         size_t instruction_len,
                         const uint32_t *content,
                         size_t content_len,
                         const double *image,
                         size_t image_len,
                         double *out,
                         size_t out_len);

/**
 * Cosine similarity of two vectors of length `len`.
 *
 * # Safety
 * `a` and `b` must hold `len` values; `out` must be writable.
 */
enum UmcStatus umc_cosine_similarity(const double *a, const double *b, size_t len, double *out);

/**
 * Position of the candidate most similar to `query`. `candidates` is `n`
 * unit-norm rows of width `dim`; ties go to the lowest position.
 *
 * # Safety
 * `query` must hold `dim` values, `candidates` `n * dim`; `out` writable.
 */
enum UmcStatus umc_match(const double *query,
                         const double *candidates,
                         size_t n,
                         size_t dim,
                         size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIMOCO_H */
