#include "wqe/wqe.h"

#include <sstream>
#include <string>

#include "wqe/deskmodel.hpp"
#include "wqe/error.hpp"
#include "wqe/eval.hpp"
#include "wqe/pipeline.hpp"
#include "wqe/trace_io.hpp"

struct wqe_trace_file {
  wqe::TraceFile file;
};

struct wqe_desk_model {
  wqe::DeskModel model;
};

namespace {

thread_local std::string last_error;

wqe_status to_status(wqe::ErrorCode code) {
  switch (code) {
    case wqe::ErrorCode::invalid_input: return WQE_ERR_INVALID_INPUT;
    case wqe::ErrorCode::shape_mismatch: return WQE_ERR_SHAPE_MISMATCH;
    case wqe::ErrorCode::parse_error: return WQE_ERR_PARSE;
    case wqe::ErrorCode::version_error: return WQE_ERR_VERSION;
    case wqe::ErrorCode::no_positives: return WQE_ERR_NO_POSITIVES;
    case wqe::ErrorCode::degenerate_input: return WQE_ERR_DEGENERATE_INPUT;
    case wqe::ErrorCode::metric_unavailable: return WQE_ERR_METRIC_UNAVAILABLE;
    case wqe::ErrorCode::alignment_error: return WQE_ERR_ALIGNMENT;
    case wqe::ErrorCode::invalid_config: return WQE_ERR_INVALID_CONFIG;
    case wqe::ErrorCode::io_error: return WQE_ERR_IO;
  }
  return WQE_ERR_INTERNAL;
}

template <typename Fn>
wqe_status guarded(Fn&& fn) {
  try {
    fn();
    last_error.clear();
    return WQE_OK;
  } catch (const wqe::Error& e) {
    last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
  } catch (const std::exception& e) {
    last_error = e.what();
  } catch (...) {
    last_error = "unknown error";
  }
  return WQE_ERR_INTERNAL;
}

wqe_status null_argument(const char* what) {
  last_error = std::string("null argument: ") + what;
  return WQE_ERR_NULL_ARGUMENT;
}

std::string str(const char* s) { return s == nullptr ? std::string() : std::string(s); }

std::vector<std::string> split_list(const char* s) {
  std::vector<std::string> out;
  if (s == nullptr) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

wqe::DeskModelConfig to_config(const wqe_desk_config& c) {
  wqe::DeskModelConfig out;
  out.vocab_size = c.vocab_size;
  out.model_dim = c.model_dim;
  out.num_layers = c.num_layers;
  out.num_heads = c.num_heads;
  out.architecture = c.encoder_decoder != 0 ? wqe::Architecture::encoder_decoder : wqe::Architecture::decoder_only;
  out.dropout_p = c.dropout_p;
  out.seed = c.seed;
  return out;
}

void forward(const wqe::Diagnostics& diags, wqe_diagnostic_fn callback, void* user_data) {
  if (callback == nullptr) return;
  for (const auto& d : diags) callback(d.to_json().c_str(), user_data);
}

std::size_t count_errors(const wqe::Diagnostics& diags) {
  std::size_t n = 0;
  for (const auto& d : diags) n += d.severity == wqe::Severity::error ? 1 : 0;
  return n;
}

// Runs `fn(diags)` and forwards the diagnostics even when it throws.
template <typename Fn>
wqe_status with_diagnostics(wqe_diagnostic_fn callback, void* user_data, Fn&& fn) {
  wqe::Diagnostics diags;
  const auto status = guarded([&] { fn(&diags); });
  const std::string saved = last_error;
  forward(diags, callback, user_data);
  last_error = saved;
  return status;
}

}  // namespace

extern "C" {

const char* wqe_last_error(void) { return last_error.c_str(); }

const char* wqe_status_name(wqe_status status) {
  switch (status) {
    case WQE_OK: return "ok";
    case WQE_ERR_NULL_ARGUMENT: return "null_argument";
    case WQE_ERR_INTERNAL: return "internal";
    default: break;
  }
  if (status >= WQE_ERR_INVALID_INPUT && status <= WQE_ERR_IO) {
    return wqe::error_code_name(static_cast<wqe::ErrorCode>(status));
  }
  return "unknown";
}

const char* wqe_version(void) { return "0.1.0"; }

wqe_status wqe_average_precision(const double* scores, const uint8_t* labels, size_t n, double* out_ap) {
  if ((n > 0 && (scores == nullptr || labels == nullptr)) || out_ap == nullptr) return null_argument("scores/labels/out_ap");
  return guarded([&] { *out_ap = wqe::average_precision({scores, n}, {labels, n}); });
}

wqe_status wqe_optimal_f1(const double* scores, const uint8_t* labels, size_t n, double* out_f1, double* out_threshold) {
  if ((n > 0 && (scores == nullptr || labels == nullptr)) || out_f1 == nullptr) return null_argument("scores/labels/out_f1");
  return guarded([&] {
    const auto r = wqe::optimal_f1({scores, n}, {labels, n});
    *out_f1 = r.f1;
    if (out_threshold != nullptr) *out_threshold = r.threshold;
  });
}

wqe_status wqe_spearman(const double* a, const double* b, size_t n, double* out_rho) {
  if ((n > 0 && (a == nullptr || b == nullptr)) || out_rho == nullptr) return null_argument("a/b/out_rho");
  return guarded([&] { *out_rho = wqe::spearman({a, n}, {b, n}); });
}

wqe_status wqe_random_baseline(const uint8_t* labels, size_t n, int trials, uint64_t seed, double* out_ap,
                               double* out_f1) {
  if (n > 0 && labels == nullptr) return null_argument("labels");
  return guarded([&] {
    const auto r = wqe::random_baseline({labels, n}, trials, seed);
    if (out_ap != nullptr) *out_ap = r.ap;
    if (out_f1 != nullptr) *out_f1 = r.f1_star;
  });
}

wqe_status wqe_expected_random_ap(size_t n, size_t positives, double* out_ap) {
  if (out_ap == nullptr) return null_argument("out_ap");
  return guarded([&] { *out_ap = wqe::expected_random_ap(n, positives); });
}

wqe_status wqe_trace_load(const char* path, wqe_trace_file** out) {
  if (path == nullptr || out == nullptr) return null_argument("path/out");
  *out = nullptr;
  return guarded([&] { *out = new wqe_trace_file{wqe::load_trace(path)}; });
}

void wqe_trace_free(wqe_trace_file* file) { delete file; }

size_t wqe_trace_num_segments(const wqe_trace_file* file) { return file == nullptr ? 0 : file->file.size(); }

int wqe_trace_kind(const wqe_trace_file* file) {
  return file != nullptr && file->file.kind == wqe::TraceKind::summary ? 1 : 0;
}

wqe_status wqe_trace_validate(const wqe_trace_file* file, wqe_diagnostic_fn callback, void* user_data,
                              size_t* out_errors) {
  if (file == nullptr) return null_argument("file");
  return with_diagnostics(callback, user_data, [&](wqe::Diagnostics* diags) {
    *diags = wqe::validate_traces(file->file);
    if (out_errors != nullptr) *out_errors = count_errors(*diags);
  });
}

void wqe_desk_config_init(wqe_desk_config* config) {
  if (config == nullptr) return;
  const wqe::DeskModelConfig d;
  *config = {d.vocab_size, d.model_dim, d.num_layers, d.num_heads,
             d.architecture == wqe::Architecture::encoder_decoder ? 1 : 0, d.dropout_p, d.seed};
}

wqe_status wqe_desk_model_create(const wqe_desk_config* config, wqe_desk_model** out) {
  if (config == nullptr || out == nullptr) return null_argument("config/out");
  *out = nullptr;
  return guarded([&] { *out = new wqe_desk_model{wqe::DeskModel(to_config(*config))}; });
}

void wqe_desk_model_free(wqe_desk_model* model) { delete model; }

uint64_t wqe_desk_model_checksum(const wqe_desk_model* model) {
  return model == nullptr ? 0 : model->model.weights_checksum();
}

wqe_status wqe_desk_model_next_token(const wqe_desk_model* model, const int* source, size_t source_len,
                                     const int* prefix, size_t prefix_len, double* out_probs, size_t out_len) {
  if (model == nullptr || out_probs == nullptr || (source_len > 0 && source == nullptr) ||
      (prefix_len > 0 && prefix == nullptr)) {
    return null_argument("model/source/prefix/out_probs");
  }
  return guarded([&] {
    const auto vocab = static_cast<std::size_t>(model->model.config().vocab_size);
    if (out_len != vocab) throw wqe::ShapeMismatch("output buffer must hold vocab_size values");
    const auto dist = model->model.next_token_distribution({source, source_len}, {prefix, prefix_len});
    std::copy(dist.begin(), dist.end(), out_probs);
  });
}

void wqe_desk_gen_options_init(wqe_desk_gen_options* options) {
  if (options == nullptr) return;
  const wqe::DeskGenOptions d;
  *options = {};
  wqe_desk_config_init(&options->model);
  options->seed = d.seed;
  options->segments = d.segments;
  options->mcd_passes = d.mcd_passes;
  options->inject_errors = d.inject_errors;
  options->annotators = d.annotators;
  options->label_noise = d.label_noise;
  options->severity_miss = d.severity_miss;
  options->temperature = d.temperature;
}

void wqe_score_options_init(wqe_score_options* options) {
  if (options == nullptr) return;
  const wqe::ScoreRunOptions d;
  *options = {};
  options->mcd_passes = d.mcd_passes;
  options->blood_probes = d.blood_probes;
  options->threads = d.threads;
}

void wqe_evaluate_options_init(wqe_evaluate_options* options) {
  if (options == nullptr) return;
  const wqe::EvaluateOptions d;
  *options = {};
  options->trials = d.trials;
  options->seed = d.seed;
}

void wqe_correlate_options_init(wqe_correlate_options* options) {
  if (options == nullptr) return;
  *options = {};
  options->threads = 1;
}

wqe_status wqe_cmd_desk_gen(const wqe_desk_gen_options* options) {
  if (options == nullptr) return null_argument("options");
  return guarded([&] {
    wqe::DeskGenOptions o;
    o.model = to_config(options->model);
    o.seed = options->seed;
    o.segments = options->segments;
    o.mcd_passes = options->mcd_passes;
    o.inject_errors = options->inject_errors;
    o.annotators = options->annotators;
    o.label_noise = options->label_noise;
    o.severity_miss = options->severity_miss;
    o.temperature = options->temperature;
    o.as_post_edits = options->as_post_edits != 0;
    o.class_probs = options->class_probs != 0;
    if (auto langs = split_list(options->languages); !langs.empty()) o.languages = std::move(langs);
    o.out_dir = str(options->out_dir);
    wqe::cmd_desk_gen(o);
  });
}

wqe_status wqe_cmd_validate(const char* traces_path, wqe_diagnostic_fn callback, void* user_data, size_t* out_errors) {
  if (traces_path == nullptr) return null_argument("traces_path");
  return with_diagnostics(callback, user_data, [&](wqe::Diagnostics* diags) {
    *diags = wqe::cmd_validate(traces_path);
    if (out_errors != nullptr) *out_errors = count_errors(*diags);
  });
}

wqe_status wqe_cmd_score(const wqe_score_options* options, wqe_diagnostic_fn callback, void* user_data) {
  if (options == nullptr || options->traces == nullptr) return null_argument("options/traces");
  return with_diagnostics(callback, user_data, [&](wqe::Diagnostics* diags) {
    wqe::ScoreRunOptions o;
    o.traces = options->traces;
    o.out_dir = str(options->out_dir);
    o.metrics = split_list(options->metrics);
    o.flip = split_list(options->flip);
    o.mcd_passes = options->mcd_passes;
    o.blood_probes = options->blood_probes;
    o.threads = options->threads;
    wqe::cmd_score(o, diags);
  });
}

wqe_status wqe_cmd_evaluate(const wqe_evaluate_options* options, wqe_diagnostic_fn callback, void* user_data) {
  if (options == nullptr || options->annotations == nullptr || options->traces == nullptr ||
      options->scores_dir == nullptr) {
    return null_argument("options/annotations/traces/scores_dir");
  }
  return with_diagnostics(callback, user_data, [&](wqe::Diagnostics* diags) {
    wqe::EvaluateOptions o;
    o.annotations = options->annotations;
    o.traces = options->traces;
    o.scores_dir = options->scores_dir;
    if (options->class_probs != nullptr && *options->class_probs != '\0') o.class_probs = options->class_probs;
    o.trials = options->trials;
    o.seed = options->seed;
    o.out_dir = str(options->out_dir);
    wqe::cmd_evaluate(o, diags);
  });
}

wqe_status wqe_cmd_correlate(const wqe_correlate_options* options, wqe_diagnostic_fn callback, void* user_data) {
  if (options == nullptr || options->annotations == nullptr || options->traces == nullptr ||
      options->scores_dir == nullptr) {
    return null_argument("options/annotations/traces/scores_dir");
  }
  return with_diagnostics(callback, user_data, [&](wqe::Diagnostics* diags) {
    wqe::CorrelateOptions o;
    o.annotations = options->annotations;
    o.traces = options->traces;
    o.scores_dir = options->scores_dir;
    o.metrics = split_list(options->metrics);
    o.threads = options->threads;
    o.out_path = str(options->out_path);
    wqe::cmd_correlate(o, diags);
  });
}

wqe_status wqe_cmd_report(const char* const* reports, const char* const* names, size_t count, const char* out_path) {
  if ((count > 0 && reports == nullptr) || out_path == nullptr) return null_argument("reports/out_path");
  return guarded([&] {
    std::vector<wqe::ReportInput> inputs;
    for (size_t i = 0; i < count; ++i) {
      if (reports[i] == nullptr) throw wqe::InvalidInput("report path " + std::to_string(i) + " is null");
      std::string name = names != nullptr && names[i] != nullptr ? names[i] : "";
      if (name.empty()) name = std::filesystem::path(reports[i]).parent_path().filename().string();
      if (name.empty()) name = "d" + std::to_string(i + 1);
      inputs.push_back({name, reports[i]});
    }
    wqe::cmd_report(inputs, out_path);
  });
}

}  // extern "C"
