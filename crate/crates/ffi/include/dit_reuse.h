#ifndef DIT_REUSE_H
#define DIT_REUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Values accepted in [`DrReuseParams::mode`].
 */
typedef enum DrReuseMode {
  DR_REUSE_MODE_ALIGNED = 0,
  DR_REUSE_MODE_INDEPENDENT = 1,
} DrReuseMode;

typedef enum DrStatus {
  DR_STATUS_OK = 0,
  DR_STATUS_NULL_POINTER = 1,
  DR_STATUS_INVALID_ARGUMENT = 2,
  DR_STATUS_CONFIG = 3,
  DR_STATUS_DIMENSION = 4,
  DR_STATUS_NUMERIC = 5,
  DR_STATUS_INVALID_STATE = 6,
  DR_STATUS_UNDEFINED_CORRELATION = 7,
  DR_STATUS_IO = 8,
  DR_STATUS_BUFFER_TOO_SMALL = 9,
  DR_STATUS_PANIC = 10,
} DrStatus;

/**
 * Proxy tap numbers accepted in [`DrReuseParams::tap`].
 */
typedef enum DrTap {
  DR_TAP_BLOCK_IN = 1,
  DR_TAP_ATTN_IN = 2,
  DR_TAP_ATTN_OUT = 3,
  DR_TAP_CROSS_ATTN_IN = 4,
  DR_TAP_CROSS_ATTN_OUT = 5,
  DR_TAP_MLP_IN = 6,
  DR_TAP_MLP_OUT = 7,
  DR_TAP_BLOCK_OUT = 8,
} DrTap;

typedef struct DrGeneration DrGeneration;

/**
 * A toy DiT plus the sampler settings used for every generation.
 */
typedef struct DrModel DrModel;

/**
 * Reuse settings. `tap` and `mode` hold [`DrTap`] and [`DrReuseMode`]
 * values; they are plain integers so that out-of-range input is an error
 * rather than undefined behaviour.
 */
typedef struct DrReuseParams {
  /**
   * Use `INFINITY` to reuse every step after warmup.
   */
  double threshold;
  double warmup_fraction;
  uint32_t tap;
  uint32_t mode;
} DrReuseParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Default toy model, 50 steps, guidance 5.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum DrStatus dr_model_new_default(struct DrModel **out);

/**
 * Build a model from an experiment config document; only its `model` and
 * `scheduler` sections are used.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` valid for a pointer write.
 */
enum DrStatus dr_model_from_json(const char *json, struct DrModel **out);

/**
 * # Safety
 * `model` must come from a `dr_model_*` constructor and not be freed yet, or be null.
 */
void dr_model_free(struct DrModel *model);

/**
 * Full-compute generation.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for a pointer write.
 */
enum DrStatus dr_generate_baseline(const struct DrModel *model,
                                   uint64_t prompt_id,
                                   struct DrGeneration **out);

/**
 * Generation with step reuse.
 *
 * # Safety
 * `model` must be a live handle, `params` readable, and `out` valid for a pointer write.
 */
enum DrStatus dr_generate(const struct DrModel *model,
                          uint64_t prompt_id,
                          const struct DrReuseParams *params,
                          struct DrGeneration **out);

/**
 * Number of `float`s in the final latent; 0 for a null handle.
 *
 * # Safety
 * `gen` must be a live handle or null.
 */
size_t dr_generation_latent_len(const struct DrGeneration *gen);

/**
 * Write the latent shape (frames, channels, height, width) to `shape[0..4]`.
 *
 * # Safety
 * `gen` must be a live handle and `shape` writable for four elements.
 */
enum DrStatus dr_generation_latent_shape(const struct DrGeneration *gen, size_t *shape);

/**
 * Copy the final latent into `buf`, which must hold `dr_generation_latent_len` floats.
 *
 * # Safety
 * `gen` must be a live handle and `buf` writable for `len` floats.
 */
enum DrStatus dr_generation_copy_latent(const struct DrGeneration *gen, float *buf, size_t len);

/**
 * Reused pass-steps over all pass-steps; NaN for a null handle.
 *
 * # Safety
 * `gen` must be a live handle or null.
 */
double dr_generation_reuse_ratio(const struct DrGeneration *gen);

/**
 * Matmul FLOPs charged over the whole run; 0 for a null handle.
 *
 * # Safety
 * `gen` must be a live handle or null.
 */
uint64_t dr_generation_total_flops(const struct DrGeneration *gen);

/**
 * # Safety
 * `gen` must be a live handle or null.
 */
size_t dr_generation_n_steps(const struct DrGeneration *gen);

/**
 * Per-step decisions, 1 = reused and 0 = computed, for the conditional and
 * unconditional passes. Either output may be null to skip it.
 *
 * # Safety
 * `gen` must be a live handle; non-null outputs must be writable for `len` bytes.
 */
enum DrStatus dr_generation_decisions(const struct DrGeneration *gen,
                                      uint8_t *cond,
                                      uint8_t *uncond,
                                      size_t len);

/**
 * # Safety
 * `gen` must come from a `dr_generate*` call and not be freed yet, or be null.
 */
void dr_generation_free(struct DrGeneration *gen);

/**
 * PSNR (dB, capped at 100) and SSIM between the decoded latents of two runs.
 *
 * # Safety
 * `a` and `b` must be live handles; `psnr_db` and `ssim_out` must be writable.
 */
enum DrStatus dr_compare(const struct DrGeneration *a,
                         const struct DrGeneration *b,
                         double *psnr_db,
                         double *ssim_out);

/**
 * Spearman rank correlation of two length-`n` arrays.
 *
 * # Safety
 * `a` and `b` must be readable for `n` doubles and `out` writable.
 */
enum DrStatus dr_spearman_rho(const double *a, const double *b, size_t n, double *out);

/**
 * Message for the most recent failed call on this thread, or null after a
 * success. Valid until the next call into this library on the same thread.
 */
const char *dr_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *dr_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIT_REUSE_H */
