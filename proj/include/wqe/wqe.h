/* C interface to the wqelab library. */
#ifndef WQE_WQE_H
#define WQE_WQE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  ifdef WQE_BUILDING_LIBRARY
#    define WQE_API __declspec(dllexport)
#  else
#    define WQE_API __declspec(dllimport)
#  endif
#else
#  define WQE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum wqe_status {
  WQE_OK = 0,
  WQE_ERR_INVALID_INPUT = 1,
  WQE_ERR_SHAPE_MISMATCH = 2,
  WQE_ERR_PARSE = 3,
  WQE_ERR_VERSION = 4,
  WQE_ERR_NO_POSITIVES = 5,
  WQE_ERR_DEGENERATE_INPUT = 6,
  WQE_ERR_METRIC_UNAVAILABLE = 7,
  WQE_ERR_ALIGNMENT = 8,
  WQE_ERR_INVALID_CONFIG = 9,
  WQE_ERR_IO = 10,
  WQE_ERR_NULL_ARGUMENT = 11,
  WQE_ERR_INTERNAL = 99
} wqe_status;

/* Message of the last failed call on this thread; empty after a success. */
WQE_API const char* wqe_last_error(void);
WQE_API const char* wqe_status_name(wqe_status status);
WQE_API const char* wqe_version(void);

/* Receives each diagnostic as a single-line JSON object. */
typedef void (*wqe_diagnostic_fn)(const char* json_line, void* user_data);

/* ---- evaluation ---- */

WQE_API wqe_status wqe_average_precision(const double* scores, const uint8_t* labels, size_t n, double* out_ap);
WQE_API wqe_status wqe_optimal_f1(const double* scores, const uint8_t* labels, size_t n, double* out_f1,
                                  double* out_threshold);
WQE_API wqe_status wqe_spearman(const double* a, const double* b, size_t n, double* out_rho);
WQE_API wqe_status wqe_random_baseline(const uint8_t* labels, size_t n, int trials, uint64_t seed, double* out_ap,
                                       double* out_f1);
WQE_API wqe_status wqe_expected_random_ap(size_t n, size_t positives, double* out_ap);

/* ---- traces ---- */

typedef struct wqe_trace_file wqe_trace_file;

WQE_API wqe_status wqe_trace_load(const char* path, wqe_trace_file** out);
WQE_API void wqe_trace_free(wqe_trace_file* file);
WQE_API size_t wqe_trace_num_segments(const wqe_trace_file* file);
/* 0 = full, 1 = summary */
WQE_API int wqe_trace_kind(const wqe_trace_file* file);
/* Reports content problems through `callback`; `out_errors` counts error-severity ones. */
WQE_API wqe_status wqe_trace_validate(const wqe_trace_file* file, wqe_diagnostic_fn callback, void* user_data,
                                      size_t* out_errors);

/* ---- desk model ---- */

typedef struct wqe_desk_config {
  int vocab_size;
  int model_dim;
  int num_layers;
  int num_heads;
  int encoder_decoder; /* 0 = decoder-only */
  double dropout_p;
  uint64_t seed;
} wqe_desk_config;

typedef struct wqe_desk_model wqe_desk_model;

WQE_API void wqe_desk_config_init(wqe_desk_config* config);
WQE_API wqe_status wqe_desk_model_create(const wqe_desk_config* config, wqe_desk_model** out);
WQE_API void wqe_desk_model_free(wqe_desk_model* model);
WQE_API uint64_t wqe_desk_model_checksum(const wqe_desk_model* model);
/* Writes vocab_size probabilities of the token following `prefix`. */
WQE_API wqe_status wqe_desk_model_next_token(const wqe_desk_model* model, const int* source, size_t source_len,
                                             const int* prefix, size_t prefix_len, double* out_probs,
                                             size_t out_len);

/* ---- pipeline commands ----
   List-valued options are comma-separated strings; NULL or "" means default. */

typedef struct wqe_desk_gen_options {
  wqe_desk_config model;
  uint64_t seed;
  size_t segments;
  int mcd_passes;
  size_t inject_errors;
  size_t annotators;
  double label_noise;
  double severity_miss;
  double temperature;
  int as_post_edits;
  int class_probs;
  const char* languages;
  const char* out_dir;
} wqe_desk_gen_options;

typedef struct wqe_score_options {
  const char* traces;
  const char* out_dir;
  const char* metrics;
  const char* flip;
  int mcd_passes;
  int blood_probes;
  unsigned threads;
} wqe_score_options;

typedef struct wqe_evaluate_options {
  const char* annotations;
  const char* traces;
  const char* scores_dir;
  const char* class_probs;
  int trials;
  uint64_t seed;
  const char* out_dir;
} wqe_evaluate_options;

typedef struct wqe_correlate_options {
  const char* annotations;
  const char* traces;
  const char* scores_dir;
  const char* metrics;
  unsigned threads;
  const char* out_path;
} wqe_correlate_options;

WQE_API void wqe_desk_gen_options_init(wqe_desk_gen_options* options);
WQE_API void wqe_score_options_init(wqe_score_options* options);
WQE_API void wqe_evaluate_options_init(wqe_evaluate_options* options);
WQE_API void wqe_correlate_options_init(wqe_correlate_options* options);

WQE_API wqe_status wqe_cmd_desk_gen(const wqe_desk_gen_options* options);
/* WQE_OK with *out_errors > 0 means the file parsed but failed validation. */
WQE_API wqe_status wqe_cmd_validate(const char* traces_path, wqe_diagnostic_fn callback, void* user_data,
                                    size_t* out_errors);
WQE_API wqe_status wqe_cmd_score(const wqe_score_options* options, wqe_diagnostic_fn callback, void* user_data);
WQE_API wqe_status wqe_cmd_evaluate(const wqe_evaluate_options* options, wqe_diagnostic_fn callback,
                                    void* user_data);
WQE_API wqe_status wqe_cmd_correlate(const wqe_correlate_options* options, wqe_diagnostic_fn callback,
                                     void* user_data);
/* `names[i]` labels the columns of `reports[i]` (a report.json path). */
WQE_API wqe_status wqe_cmd_report(const char* const* reports, const char* const* names, size_t count,
                                  const char* out_path);

#ifdef __cplusplus
}
#endif

#endif /* WQE_WQE_H */
