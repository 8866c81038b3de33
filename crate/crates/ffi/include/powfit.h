#ifndef POWFIT_H
#define POWFIT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PowfitStatus {
  POWFIT_STATUS_OK = 0,
  /**
   * A required pointer was null or a buffer was too small.
   */
  POWFIT_STATUS_INVALID_ARGUMENT = 1,
  POWFIT_STATUS_DIMENSION = 2,
  POWFIT_STATUS_DOMAIN = 3,
  POWFIT_STATUS_NON_FINITE = 4,
  POWFIT_STATUS_STRUCTURE = 5,
  POWFIT_STATUS_TRAINING = 6,
  POWFIT_STATUS_SOLVER = 7,
  POWFIT_STATUS_RANGE = 8,
  POWFIT_STATUS_PARSE = 9,
  POWFIT_STATUS_VALIDATION = 10,
  POWFIT_STATUS_IO = 11,
  /**
   * A Rust panic was caught at the boundary.
   */
  POWFIT_STATUS_INTERNAL = 12,
} PowfitStatus;

typedef struct PowfitDataset PowfitDataset;

/**
 * Float model (batch-norms not folded).
 */
typedef struct PowfitModel PowfitModel;

typedef struct PowfitQModel PowfitQModel;

/**
 * Quantization settings; obtain defaults from [`powfit_quantize_config_default`].
 */
typedef struct PowfitQuantizeConfig {
  uint32_t bits_w;
  uint32_t bits_a;
  /**
   * 1 or 2.
   */
  uint32_t norm_p;
  bool per_channel;
  bool per_layer;
  bool grid_solver;
  /**
   * Fixed global exponent when positive; fitted otherwise.
   */
  double fixed_a;
  bool dynamic_ranges;
  double n_sigma;
  bool post_accumulation;
  bool bias_correct;
} PowfitQuantizeConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *powfit_last_error(void);

/**
 * Loads a model directory (`model.json` + `weights.bin`).
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum PowfitStatus powfit_model_load(const char *dir, struct PowfitModel **out);

/**
 * # Safety
 * `model` must come from [`powfit_model_load`] and not be freed twice.
 */
void powfit_model_free(struct PowfitModel *model);

/**
 * Number of values in the model's input.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t powfit_model_input_len(const struct PowfitModel *model);

/**
 * Number of values in the model's output.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t powfit_model_output_len(const struct PowfitModel *model);

/**
 * Float forward pass of one flattened input.
 *
 * # Safety
 * `input` must point to `input_len` doubles and `output` to `output_len`
 * writable doubles.
 */
enum PowfitStatus powfit_model_forward(const struct PowfitModel *model,
                                       const double *input,
                                       size_t input_len,
                                       double *output,
                                       size_t output_len);

/**
 * Loads a dataset CSV (`f0,...,label`).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum PowfitStatus powfit_dataset_load(const char *path, struct PowfitDataset **out);

/**
 * # Safety
 * `dataset` must come from [`powfit_dataset_load`] and not be freed twice.
 */
void powfit_dataset_free(struct PowfitDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null.
 */
size_t powfit_dataset_len(const struct PowfitDataset *dataset);

/**
 * Float accuracy of `model` on `dataset`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum PowfitStatus powfit_model_accuracy(const struct PowfitModel *model,
                                        const struct PowfitDataset *dataset,
                                        double *out);

struct PowfitQuantizeConfig powfit_quantize_config_default(void);

/**
 * Fits a global exponent on the BN-folded model and reports `a*`, `ε(a*)`
 * and `ε(1)`. Any output pointer may be null.
 *
 * # Safety
 * `model` and `config` must be valid; non-null outputs must be writable.
 */
enum PowfitStatus powfit_fit(const struct PowfitModel *model,
                             const struct PowfitQuantizeConfig *config,
                             double *a_star,
                             double *epsilon,
                             double *epsilon_uniform);

/**
 * Quantizes `model`; `calibration` may be null only with BN-derived
 * ranges for every layer input.
 *
 * # Safety
 * Handles and `config` must be valid; `out` must be writable.
 */
enum PowfitStatus powfit_quantize(const struct PowfitModel *model,
                                  const struct PowfitDataset *calibration,
                                  const struct PowfitQuantizeConfig *config,
                                  struct PowfitQModel **out);

/**
 * Loads a quantized model directory (`qmodel.json` + `qweights.bin`).
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum PowfitStatus powfit_qmodel_load(const char *dir, struct PowfitQModel **out);

/**
 * # Safety
 * `qmodel` must be live; `dir` a valid NUL-terminated string.
 */
enum PowfitStatus powfit_qmodel_save(const struct PowfitQModel *qmodel, const char *dir);

/**
 * # Safety
 * `qmodel` must come from this library and not be freed twice.
 */
void powfit_qmodel_free(struct PowfitQModel *qmodel);

/**
 * # Safety
 * `qmodel` must be a live handle or null.
 */
size_t powfit_qmodel_output_len(const struct PowfitQModel *qmodel);

/**
 * Exponent of weighted layer `layer`, or NaN when out of range.
 *
 * # Safety
 * `qmodel` must be a live handle or null.
 */
double powfit_qmodel_exponent(const struct PowfitQModel *qmodel, size_t layer);

/**
 * Simulated quantized forward pass of one flattened input.
 *
 * # Safety
 * `input` must point to `input_len` doubles and `output` to `output_len`
 * writable doubles.
 */
enum PowfitStatus powfit_qmodel_forward(const struct PowfitQModel *qmodel,
                                        const double *input,
                                        size_t input_len,
                                        double *output,
                                        size_t output_len);

/**
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum PowfitStatus powfit_qmodel_accuracy(const struct PowfitQModel *qmodel,
                                         const struct PowfitDataset *dataset,
                                         double *out);

/**
 * `code^exponent_inv` by integer Newton iterations, returned as a double.
 *
 * # Safety
 * `out` must be writable.
 */
enum PowfitStatus powfit_int_power(uint64_t code,
                                   double exponent_inv,
                                   uint32_t iterations,
                                   uint32_t fraction_bits,
                                   double *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *powfit_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POWFIT_H */
