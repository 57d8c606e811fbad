#ifndef XFI_H
#define XFI_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum XfiStatus {
  XFI_STATUS_OK = 0,
  XFI_STATUS_NULL_POINTER = 1,
  XFI_STATUS_INVALID_ARGUMENT = 2,
  XFI_STATUS_CONFIG = 3,
  XFI_STATUS_SHAPE = 4,
  XFI_STATUS_NUMERIC = 5,
  XFI_STATUS_CHECKPOINT = 6,
  XFI_STATUS_IO = 7,
  XFI_STATUS_PANIC = 8,
} XfiStatus;

// Base preset for [`xfi_experiment_new`].
typedef enum XfiPreset {
  XFI_PRESET_DESK = 0,
  XFI_PRESET_PAPER = 1,
} XfiPreset;

// Harness command for [`xfi_experiment_run`].
typedef enum XfiCommand {
  XFI_COMMAND_TRAIN = 0,
  XFI_COMMAND_EVAL = 1,
  XFI_COMMAND_ABLATE = 2,
  XFI_COMMAND_VARIANTS = 3,
} XfiCommand;

// Opaque experiment: merged config, digest and generated dataset.
typedef struct XfiExperiment XfiExperiment;

// Opaque trained model bound to the experiment that produced it.
typedef struct XfiModel XfiModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null if none. The pointer stays
// valid until the next failing call on the same thread.
const char *xfi_last_error_message(void);

// Builds an experiment from TOML text merged onto `preset` (`config_toml` may be null
// for the bare preset) and writes a new handle to `*out`.
//
// # Safety
// `config_toml` must be null or a NUL-terminated string; `out` must be writable.
enum XfiStatus xfi_experiment_new(const char *config_toml,
                                  enum XfiPreset preset,
                                  struct XfiExperiment **out);

// Releases an experiment handle. Null is ignored.
//
// # Safety
// `handle` must come from [`xfi_experiment_new`] and not be used afterwards.
void xfi_experiment_free(struct XfiExperiment *handle);

// Copies the 64-character hex config digest plus a NUL into `buf` (capacity `len`).
//
// # Safety
// `handle` must be valid; `buf` must hold `len` bytes.
enum XfiStatus xfi_experiment_digest(const struct XfiExperiment *handle, char *buf, size_t len);

// Number of modalities, in canonical order.
//
// # Safety
// `handle` must be valid; `out` must be writable.
enum XfiStatus xfi_experiment_modality_count(const struct XfiExperiment *handle, size_t *out);

// Runs a harness command, writing artifacts under `out_dir`.
//
// # Safety
// `handle` must be valid; `out_dir` must be a NUL-terminated path.
enum XfiStatus xfi_experiment_run(const struct XfiExperiment *handle,
                                  enum XfiCommand command,
                                  const char *out_dir);

// Trains the configured fusion variant in memory and writes a model handle to `*out`.
//
// # Safety
// `handle` must be valid; `out` must be writable.
enum XfiStatus xfi_model_train(const struct XfiExperiment *handle, struct XfiModel **out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from [`xfi_model_train`] and not be used afterwards.
void xfi_model_free(struct XfiModel *model);

// Evaluates `model` on the experiment's evaluation split with the modalities whose bits
// are set in `subset_mask` (bit `i` is canonical modality `i`). Writes up to `capacity`
// metric values to `values` (HPE: MPJPE, PA-MPJPE; HAR: accuracy, silhouette,
// Calinski–Harabasz) and their count to `*written`.
//
// # Safety
// Handles must be valid; `values` must hold `capacity` doubles; `written` must be writable.
enum XfiStatus xfi_model_eval_subset(const struct XfiExperiment *handle,
                                     const struct XfiModel *model,
                                     uint32_t subset_mask,
                                     double *values,
                                     size_t capacity,
                                     size_t *written);

// Joint probability of occurrence counts `counts[i]` over `m` iterations with
// per-modality probabilities `probs[i]`.
//
// # Safety
// `counts` and `probs` must hold `n` elements; `out` must be writable.
enum XfiStatus xfi_binomial_count_pmf(const uint64_t *counts,
                                      const double *probs,
                                      size_t n,
                                      uint64_t m,
                                      double *out);

// MPJPE and PA-MPJPE of `pred` against `gt`, both row-major `joints × 3`.
//
// # Safety
// `pred` and `gt` must hold `3·joints` doubles; outputs must be writable.
enum XfiStatus xfi_keypoint_metrics(const double *pred,
                                    const double *gt,
                                    size_t joints,
                                    double *mpjpe,
                                    double *pa_mpjpe);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XFI_H */
