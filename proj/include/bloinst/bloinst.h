/* Copyright 2026 The BLO-Inst Authors
 * SPDX-License-Identifier: Apache-2.0 */

/* C interface of the bloinst library. Every call returns a status code;
 * on failure bloi_last_error() describes the problem for the calling thread.
 * Strings returned through char** are owned by the caller and released with
 * bloi_string_free. */

#ifndef BLOINST_BLOINST_H
#define BLOINST_BLOINST_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define BLOI_API __declspec(dllexport)
#else
#define BLOI_API __attribute__((visibility("default")))
#endif

typedef enum bloi_status {
    BLOI_OK = 0,
    BLOI_ERR_INTERNAL = 1,
    BLOI_ERR_USAGE = 2,
    BLOI_ERR_IO = 3,
    BLOI_ERR_DIVERGENCE = 4,
    BLOI_ERR_COMPATIBILITY = 5
} bloi_status;

typedef struct bloi_dataset bloi_dataset;
typedef struct bloi_model bloi_model;

BLOI_API const char* bloi_version(void);
BLOI_API const char* bloi_last_error(void);
BLOI_API void bloi_string_free(char* s);

/* ---- datasets ---------------------------------------------------------- */

/* options: JSON object with optional keys n, size, classes (array of
 * "disk" | "square" | "triangle"), density, seed. */
BLOI_API bloi_status bloi_dataset_generate(const char* options_json, bloi_dataset** out);
/* dir holds annotations.json and images/. */
BLOI_API bloi_status bloi_dataset_load(const char* dir, bloi_dataset** out);
BLOI_API bloi_status bloi_dataset_save(const bloi_dataset* dataset, const char* dir);
/* JSON: images, instances, image_size, channels, classes. */
BLOI_API bloi_status bloi_dataset_info(const bloi_dataset* dataset, char** info_json);
BLOI_API void bloi_dataset_free(bloi_dataset* dataset);

/* ---- training ---------------------------------------------------------- */

/* strategy: "bilevel-first" | "bilevel-second" | "single-level" | "separate".
 * config_json: training keys (alpha, beta, T, gamma_split, seed, ...) and an
 * optional "model" object with architecture sizes; NULL means defaults.
 * test may be NULL. On BLOI_ERR_DIVERGENCE *out still receives the last
 * finite parameters and the trace up to the failing iteration. */
BLOI_API bloi_status bloi_train(const bloi_dataset* train, const bloi_dataset* test, const char* strategy,
                                const char* config_json, bloi_model** out);

/* Default training configuration, as accepted by bloi_train. */
BLOI_API bloi_status bloi_default_config(char** config_json);

typedef struct bloi_losses {
    double box;
    double obj;
    double cls;
    double seg;
    double total;
} bloi_losses;

typedef struct bloi_trace_row {
    size_t iteration;
    const char* stage; /* static string */
    bloi_losses lower;
    bloi_losses upper;
    int has_lower;
    int has_upper;
    int has_ap;
    double map;
    double ap50;
    double ap75;
    double wall_seconds;
    int second_term_skipped;
} bloi_trace_row;

BLOI_API size_t bloi_model_trace_length(const bloi_model* model);
BLOI_API bloi_status bloi_model_trace_row(const bloi_model* model, size_t index, bloi_trace_row* row);

/* JSON: strategy, config, model, classes, d1, d2, second_term_skips,
 * pretrain (first/last loss), final report when a test set was given,
 * diverged_at when training diverged. */
BLOI_API bloi_status bloi_model_summary(const bloi_model* model, char** summary_json);

/* ---- checkpoints and evaluation --------------------------------------- */

BLOI_API bloi_status bloi_model_save(const bloi_model* model, const char* path);
BLOI_API bloi_status bloi_model_load(const char* path, bloi_model** out);
/* Hex digest of configuration and parameters. */
BLOI_API bloi_status bloi_model_digest(const bloi_model* model, char** digest);
/* Report JSON: mAP, AP50, AP75, per_threshold, per_class, n_pred, n_gt. */
BLOI_API bloi_status bloi_model_evaluate(const bloi_model* model, const bloi_dataset* dataset, double conf_threshold,
                                         double nms_iou, char** report_json);
BLOI_API void bloi_model_free(bloi_model* model);

#ifdef __cplusplus
}
#endif

#endif /* BLOINST_BLOINST_H */
