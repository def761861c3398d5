/* Generated by cbindgen. Do not edit. */

#ifndef BAYES_LTH_H
#define BAYES_LTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BlthStatus {
  BLTH_STATUS_OK = 0,
  BLTH_STATUS_NULL_POINTER = 1,
  BLTH_STATUS_INVALID_ARGUMENT = 2,
  BLTH_STATUS_CONFIG = 3,
  BLTH_STATUS_SHAPE = 4,
  BLTH_STATUS_IO = 5,
  BLTH_STATUS_FORMAT = 6,
  BLTH_STATUS_PANIC = 7,
} BlthStatus;

/**
 * Experiment configuration handle.
 */
typedef struct BlthConfig BlthConfig;

/**
 * Model handle: parameters and masks.
 */
typedef struct BlthModel BlthModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *blth_version(void);

/**
 * Message of the last failure on this thread. Valid until the next failing call.
 */
const char *blth_last_error(void);

/**
 * Creates a configuration holding the defaults.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum BlthStatus blth_config_new(struct BlthConfig **out);

/**
 * Parses `key = value` text into a new configuration.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must be writable.
 */
enum BlthStatus blth_config_parse(const char *text, struct BlthConfig **out);

/**
 * Sets one configuration key.
 *
 * # Safety
 * `config` must come from this library; `key` and `value` must be NUL-terminated.
 */
enum BlthStatus blth_config_set(struct BlthConfig *config, const char *key, const char *value);

/**
 * # Safety
 * `config` must be null or a handle from this library not yet freed.
 */
void blth_config_free(struct BlthConfig *config);

/**
 * Builds a freshly initialized model from `config`.
 *
 * # Safety
 * `config` must be a live handle; `out` must be writable.
 */
enum BlthStatus blth_model_build(const struct BlthConfig *config,
                                 uint64_t seed,
                                 struct BlthModel **out);

/**
 * Builds a model from `config` and loads a checkpoint into it.
 *
 * # Safety
 * `config` must be a live handle; `path` NUL-terminated; `out` writable.
 */
enum BlthStatus blth_model_load(const struct BlthConfig *config,
                                const char *path,
                                struct BlthModel **out);

/**
 * Writes the model's parameters and masks as a checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum BlthStatus blth_model_save(const struct BlthModel *model,
                                const char *path,
                                uint64_t seed,
                                uint32_t level);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void blth_model_free(struct BlthModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t blth_model_num_classes(const struct BlthModel *model);

/**
 * Fraction of prunable weights still unmasked.
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
enum BlthStatus blth_model_remaining_fraction(const struct BlthModel *model, double *out);

/**
 * Prunes `rate` of the remaining prunable weights globally and installs the new mask.
 *
 * `score`: 0 magnitude, 1 snr, 2 square, 3 mu.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum BlthStatus blth_model_prune(struct BlthModel *model, uint32_t score, double rate);

/**
 * Mean of `samples` post-softmax predictions.
 *
 * `shape` holds `ndim` dimensions, batch first; `input` holds their product
 * in row-major order. `out` receives `batch * num_classes` probabilities.
 *
 * # Safety
 * All pointers must reference buffers of the stated lengths.
 */
enum BlthStatus blth_model_predict_mean(const struct BlthModel *model,
                                        const float *input,
                                        const uintptr_t *shape,
                                        uintptr_t ndim,
                                        uintptr_t samples,
                                        uint64_t seed,
                                        float *out,
                                        uintptr_t out_len);

/**
 * Mean absolute calibration error over `bins` equal-width bins.
 *
 * # Safety
 * `confidences`, `predictions` and `labels` must each hold `n` values; `out` writable.
 */
enum BlthStatus blth_mace(const double *confidences,
                          const uint32_t *predictions,
                          const uint32_t *labels,
                          uintptr_t n,
                          uintptr_t bins,
                          double *out);

/**
 * Runs a pipeline (`train`, `imp`, `lrr` or `transplant`) writing outputs to `out_dir`.
 *
 * # Safety
 * `config` must be a live handle; strings NUL-terminated.
 */
enum BlthStatus blth_run(const struct BlthConfig *config, const char *command, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAYES_LTH_H */
