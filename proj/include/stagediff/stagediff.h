/* Copyright 2026 The stagediff Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the stagediff library.
 *
 * Every function returns a status code (STAGEDIFF_OK on success). On failure
 * stagediff_last_error() describes the problem; the message is thread-local
 * and valid until the next call on the same thread. Output handles and
 * strings are only written on success. Strings returned through char** must
 * be released with stagediff_string_free, byte/float buffers with
 * stagediff_buffer_free.
 *
 * Configuration is passed as JSON text; NULL or "" selects the defaults, and
 * omitted keys keep their default values.
 */
#ifndef STAGEDIFF_STAGEDIFF_H_
#define STAGEDIFF_STAGEDIFF_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define STAGEDIFF_API __declspec(dllexport)
#else
#define STAGEDIFF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum stagediff_status {
  STAGEDIFF_OK = 0,
  STAGEDIFF_ERR_INVALID_ARGUMENT = 1,
  STAGEDIFF_ERR_SHAPE = 2,
  STAGEDIFF_ERR_OUT_OF_RANGE = 3,
  STAGEDIFF_ERR_IO = 4,
  STAGEDIFF_ERR_FORMAT = 5,
  STAGEDIFF_ERR_NUMERIC = 6,
  STAGEDIFF_ERR_STATE = 7,
  STAGEDIFF_ERR_INTERNAL = 99
} stagediff_status;

typedef struct stagediff_dataset stagediff_dataset;
typedef struct stagediff_model stagediff_model;
typedef struct stagediff_ensemble stagediff_ensemble;

STAGEDIFF_API const char* stagediff_version(void);
STAGEDIFF_API const char* stagediff_last_error(void);
STAGEDIFF_API const char* stagediff_status_name(int status);
STAGEDIFF_API void stagediff_string_free(char* s);
STAGEDIFF_API void stagediff_buffer_free(void* p);

/* Datasets ---------------------------------------------------------------
 * synth_json keys: num_domains, samples_per_domain, side, empty_mask_fraction,
 * empty_domain, empty_domain_fraction, num_folds, seed.
 * ingest_json keys: side, num_folds, seed. */
STAGEDIFF_API int stagediff_dataset_generate(const char* synth_json, stagediff_dataset** out);
STAGEDIFF_API int stagediff_dataset_ingest(const char* root, const char* ingest_json, stagediff_dataset** out);
STAGEDIFF_API int stagediff_dataset_load(const char* dir, stagediff_dataset** out);
STAGEDIFF_API int stagediff_dataset_save(const stagediff_dataset* ds, const char* dir);
STAGEDIFF_API int stagediff_dataset_size(const stagediff_dataset* ds, size_t* count, int* side);
/* Manifest JSON: ids, domains, folds and per-record checksums. */
STAGEDIFF_API int stagediff_dataset_manifest(const stagediff_dataset* ds, char** json);
/* Copies record `index`: image (side*side floats) and mask (side*side bytes,
 * 0 or 1). Either buffer may be NULL. */
STAGEDIFF_API int stagediff_dataset_record(const stagediff_dataset* ds, size_t index, float* image, uint8_t* mask);
STAGEDIFF_API void stagediff_dataset_free(stagediff_dataset* ds);

/* Models -----------------------------------------------------------------
 * network_json keys: input_side, in_channels, widths, dca_levels, use_dca,
 * heads, time_dim. train_json keys: epochs, batch_size, lr, min_lr,
 * optimizer, clip_norm, seed, policy, beta, num_timesteps, method, fold,
 * augment, val_every, val_samples, val_fanout, cache_features. Training logs
 * are appended to log_path as line-delimited JSON when it is non-NULL. */
STAGEDIFF_API int stagediff_pretrain(const stagediff_dataset* ds, const char* network_json, const char* train_json,
                                     const char* log_path, stagediff_model** out);
/* Trains a fresh denoiser against the model's frozen feature network. */
STAGEDIFF_API int stagediff_train(const stagediff_dataset* ds, stagediff_model* model, const char* train_json,
                                  const char* log_path);
STAGEDIFF_API int stagediff_model_save(const stagediff_model* model, const char* path);
STAGEDIFF_API int stagediff_model_load(const char* path, stagediff_model** out);
/* Configuration, parameter counts and checksums. */
STAGEDIFF_API int stagediff_model_info(const stagediff_model* model, char** json);
STAGEDIFF_API void stagediff_model_free(stagediff_model* model);

/* Inference --------------------------------------------------------------
 * sampler_json keys: t_start, t_mid_high, t_mid_low, ddim_interval,
 * fanout_per_branch, eta_refine, seed. `image` holds side*side floats in
 * [-1, 1]. */
STAGEDIFF_API int stagediff_infer(const stagediff_model* model, const float* image, size_t n, const char* sampler_json,
                                  stagediff_ensemble** out);
STAGEDIFF_API int stagediff_ensemble_size(const stagediff_ensemble* ens, size_t* masks, size_t* pixels);
STAGEDIFF_API int stagediff_ensemble_mask(const stagediff_ensemble* ens, size_t index, uint8_t* out, size_t n);
/* Provenance per mask, trunk timesteps and network call counts. */
STAGEDIFF_API int stagediff_ensemble_info(const stagediff_ensemble* ens, char** json);
STAGEDIFF_API void stagediff_ensemble_free(stagediff_ensemble* ens);

/* Baseline inference for the ablation rows. method: "uniform-noise",
 * "uniform-mask", "one-step-noise" or "one-step-mask"; steps applies to the
 * uniform methods. */
STAGEDIFF_API int stagediff_infer_baseline(const stagediff_model* model, const float* image, size_t n,
                                           const char* method, int steps, uint64_t seed, uint8_t* out);

/* Per-sampler-config counts: trunk evaluations and total network calls. */
STAGEDIFF_API int stagediff_count_evaluations(const char* sampler_json, int* trunk, int* total);

/* Fusion -----------------------------------------------------------------
 * masks: count*pixels bytes, mask j at offset j*pixels, nonzero = foreground.
 * staple_json keys: alpha0, beta0, prior, iterations. state_json (optional)
 * receives the final rates and the log-likelihood trace. */
STAGEDIFF_API int stagediff_staple(const uint8_t* masks, size_t count, size_t pixels, const char* staple_json,
                                   uint8_t* consensus, char** state_json);

/* Metrics; two empty masks score (1, 1). */
STAGEDIFF_API int stagediff_dice_iou(const uint8_t* pred, const uint8_t* gt, size_t n, double* dice, double* iou);

/* Whole-split evaluation. eval_json keys: fold, method, sampler, uniform_steps,
 * fuse, empty_policy ("score-one" or "exclude"), max_samples. The report
 * lists per-sample scores and the summaries. */
STAGEDIFF_API int stagediff_evaluate(const stagediff_model* model, const stagediff_dataset* ds, const char* eval_json,
                                     char** report_json);

/* Ablation matrix: matrix_json is an array of {"name", "train": {...}};
 * each row trains a denoiser against the model's feature network. */
STAGEDIFF_API int stagediff_ablate(const stagediff_dataset* ds, const stagediff_model* model, const char* matrix_json,
                                   const char* eval_json, const char* log_path, char** table_json);

/* Gradient-norm profile. profile_json keys: target ("noise" | "mask"),
 * steps, bins, warmup_steps, warmup_batch, lr, seed, fold. Writes CSV to
 * csv_path when non-NULL; profile_json_out (optional) receives the bins. */
STAGEDIFF_API int stagediff_profile(const stagediff_dataset* ds, const stagediff_model* model, const char* profile_json,
                                    const char* csv_path, char** profile_json_out);

/* Rasters ----------------------------------------------------------------
 * Binary PGM (P5). Images are min-max normalized to [-1, 1] and resized
 * bilinearly to side x side; masks must hold only 0 and maxval and are
 * resized with nearest neighbour. Buffers are allocated by the library. */
STAGEDIFF_API int stagediff_image_load(const char* path, int side, float** image);
STAGEDIFF_API int stagediff_mask_load(const char* path, int side, uint8_t** mask);
/* Writes a 0/1 mask as a 0/255 PGM. */
STAGEDIFF_API int stagediff_mask_save(const char* path, const uint8_t* mask, int width, int height);

STAGEDIFF_API int stagediff_sha256_file(const char* path, char** hex);
STAGEDIFF_API int stagediff_sha256_bytes(const void* data, size_t n, char** hex);

#ifdef __cplusplus
}
#endif

#endif /* STAGEDIFF_STAGEDIFF_H_ */
