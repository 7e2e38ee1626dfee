// Command-line front end. Uses only the C interface of libwqe.
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "wqe/wqe.h"

namespace {

bool json_diagnostics = false;

void print_diagnostic(const char* line, void*) {
  if (json_diagnostics) {
    std::fprintf(stderr, "%s\n", line);
    return;
  }
  const auto d = nlohmann::json::parse(line);
  std::string where = d.value("segment_id", "");
  if (d.contains("step") && !d["step"].is_null()) where += "#" + std::to_string(d["step"].get<std::size_t>());
  std::fprintf(stderr, "%s: [%s] %s%s%s: %s\n", d.value("severity", "").c_str(), d.value("rule", "").c_str(),
               where.c_str(), where.empty() ? "" : " ", d.value("field", "").c_str(), d.value("message", "").c_str());
}

int exit_code(wqe_status status) {
  switch (status) {
    case WQE_OK:
      return 0;
    case WQE_ERR_NO_POSITIVES:
    case WQE_ERR_DEGENERATE_INPUT:
      return 3;
    case WQE_ERR_INVALID_INPUT:
    case WQE_ERR_SHAPE_MISMATCH:
    case WQE_ERR_PARSE:
    case WQE_ERR_VERSION:
    case WQE_ERR_METRIC_UNAVAILABLE:
    case WQE_ERR_ALIGNMENT:
      return 2;
    default:
      return 1;
  }
}

int finish(wqe_status status, const char* command) {
  if (status != WQE_OK) {
    if (json_diagnostics) {
      const nlohmann::json j = {{"severity", "error"},
                                {"rule", wqe_status_name(status)},
                                {"command", command},
                                {"message", wqe_last_error()}};
      std::fprintf(stderr, "%s\n", j.dump().c_str());
    } else {
      std::fprintf(stderr, "wqe %s: %s: %s\n", command, wqe_status_name(status), wqe_last_error());
    }
  }
  return exit_code(status);
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ",") + s;
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Word-level quality estimation lab"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_flag("--json-diagnostics", json_diagnostics, "Write diagnostics to stderr as JSON lines");
  app.set_version_flag("--version", wqe_version());
  // TOML/INI file with one [<subcommand>] section per command, e.g. [desk-gen] segments = 500.
  app.set_config("--config", "", "Config file; command-line values take precedence");

  // desk-gen
  wqe_desk_gen_options gen;
  wqe_desk_gen_options_init(&gen);
  std::string gen_out, gen_arch = "decoder_only";
  std::vector<std::string> gen_languages;
  bool gen_post_edits = false, gen_class_probs = false;
  auto* desk = app.add_subcommand("desk-gen", "Generate a synthetic corpus with the desk model");
  desk->add_option("--out", gen_out, "Output directory")->required();
  desk->add_option("--seed", gen.seed, "Corpus seed")->capture_default_str();
  desk->add_option("--segments", gen.segments, "Number of segments")->capture_default_str();
  desk->add_option("--mcd-passes", gen.mcd_passes, "Dropout passes per segment")->capture_default_str();
  desk->add_option("--inject-errors", gen.inject_errors, "Corrupted target tokens per segment")->capture_default_str();
  desk->add_option("--annotators", gen.annotators, "Synthetic annotators")->capture_default_str();
  desk->add_option("--label-noise", gen.label_noise, "Per-token label flip probability")->capture_default_str();
  desk->add_option("--severity-miss", gen.severity_miss,
                   "Extra miss probability for injected errors, scaled by (1 - severity)")
      ->capture_default_str();
  desk->add_option("--temperature", gen.temperature, "Sampling temperature")->capture_default_str();
  desk->add_flag("--as-post-edits", gen_post_edits, "Annotators deliver post-edits");
  desk->add_flag("--class-probs", gen_class_probs, "Also write synthetic classifier probabilities");
  desk->add_option("--languages", gen_languages, "Language codes assigned round-robin")->delimiter(',');
  desk->add_option("--vocab-size", gen.model.vocab_size)->capture_default_str();
  desk->add_option("--model-dim", gen.model.model_dim)->capture_default_str();
  desk->add_option("--num-layers", gen.model.num_layers)->capture_default_str();
  desk->add_option("--num-heads", gen.model.num_heads)->capture_default_str();
  desk->add_option("--architecture", gen_arch)->check(CLI::IsMember({"decoder_only", "encoder_decoder"}))->capture_default_str();
  desk->add_option("--dropout", gen.model.dropout_p)->capture_default_str();
  desk->add_option("--model-seed", gen.model.seed, "Weight initialisation seed")->capture_default_str();

  // validate
  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a trace file");
  validate->add_option("traces,--traces", validate_path, "Trace file")->required();

  // score
  wqe_score_options score;
  wqe_score_options_init(&score);
  std::string score_traces, score_out;
  std::vector<std::string> score_metrics, score_flip;
  auto* sc = app.add_subcommand("score", "Compute per-token metric scores");
  sc->add_option("--traces", score_traces, "Trace file")->required();
  sc->add_option("--out", score_out, "Output directory")->required();
  sc->add_option("--metrics", score_metrics, "Metric families (default: all)")->delimiter(',');
  sc->add_option("--flip", score_flip, "Metric families to negate")->delimiter(',');
  sc->add_option("--mcd-passes", score.mcd_passes)->capture_default_str();
  sc->add_option("--blood-probes", score.blood_probes)->capture_default_str();
  sc->add_option("--threads", score.threads)->capture_default_str();

  // evaluate
  wqe_evaluate_options ev;
  wqe_evaluate_options_init(&ev);
  std::string ev_annotations, ev_traces, ev_scores, ev_class_probs, ev_out;
  auto* evaluate = app.add_subcommand("evaluate", "AP / F1* evaluation against annotations");
  evaluate->add_option("--annotations", ev_annotations)->required();
  evaluate->add_option("--traces", ev_traces)->required();
  evaluate->add_option("--scores", ev_scores, "Directory of *.scores.jsonl")->required();
  evaluate->add_option("--class-probs", ev_class_probs);
  evaluate->add_option("--trials", ev.trials, "Random-baseline trials")->capture_default_str();
  evaluate->add_option("--seed", ev.seed)->capture_default_str();
  evaluate->add_option("--out", ev_out, "Output directory")->required();

  // correlate
  wqe_correlate_options co;
  wqe_correlate_options_init(&co);
  std::string co_annotations, co_traces, co_scores, co_out;
  std::vector<std::string> co_metrics;
  auto* correlate = app.add_subcommand("correlate", "Spearman bands against edit counts of annotator subsets");
  correlate->add_option("--annotations", co_annotations)->required();
  correlate->add_option("--traces", co_traces)->required();
  correlate->add_option("--scores", co_scores)->required();
  correlate->add_option("--metrics", co_metrics)->delimiter(',');
  correlate->add_option("--threads", co.threads)->capture_default_str();
  correlate->add_option("--out", co_out, "Output CSV")->required();

  // report
  std::vector<std::string> report_inputs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "Merge report.json files into one table");
  report->add_option("inputs", report_inputs, "[name=]path/to/report.json")->required();
  report->add_option("--out", report_out, "Output TSV")->required();

  CLI11_PARSE(app, argc, argv);

  if (*desk) {
    gen.model.encoder_decoder = gen_arch == "encoder_decoder" ? 1 : 0;
    gen.as_post_edits = gen_post_edits ? 1 : 0;
    gen.class_probs = gen_class_probs ? 1 : 0;
    const std::string langs = join(gen_languages);
    gen.languages = langs.c_str();
    gen.out_dir = gen_out.c_str();
    return finish(wqe_cmd_desk_gen(&gen), "desk-gen");
  }
  if (*validate) {
    size_t errors = 0;
    const auto status = wqe_cmd_validate(validate_path.c_str(), print_diagnostic, nullptr, &errors);
    if (status != WQE_OK) {
      finish(status, "validate");
      return 2;
    }
    if (errors > 0) {
      std::fprintf(stderr, "wqe validate: %zu error(s)\n", errors);
      return 2;
    }
    return 0;
  }
  if (*sc) {
    const std::string metrics = join(score_metrics), flip = join(score_flip);
    score.traces = score_traces.c_str();
    score.out_dir = score_out.c_str();
    score.metrics = metrics.c_str();
    score.flip = flip.c_str();
    return finish(wqe_cmd_score(&score, print_diagnostic, nullptr), "score");
  }
  if (*evaluate) {
    ev.annotations = ev_annotations.c_str();
    ev.traces = ev_traces.c_str();
    ev.scores_dir = ev_scores.c_str();
    ev.class_probs = ev_class_probs.c_str();
    ev.out_dir = ev_out.c_str();
    return finish(wqe_cmd_evaluate(&ev, print_diagnostic, nullptr), "evaluate");
  }
  if (*correlate) {
    const std::string metrics = join(co_metrics);
    co.annotations = co_annotations.c_str();
    co.traces = co_traces.c_str();
    co.scores_dir = co_scores.c_str();
    co.metrics = metrics.c_str();
    co.out_path = co_out.c_str();
    return finish(wqe_cmd_correlate(&co, print_diagnostic, nullptr), "correlate");
  }
  if (*report) {
    std::vector<std::string> names, paths;
    for (const auto& in : report_inputs) {
      const auto eq = in.find('=');
      names.push_back(eq == std::string::npos ? "" : in.substr(0, eq));
      paths.push_back(eq == std::string::npos ? in : in.substr(eq + 1));
    }
    std::vector<const char*> name_ptrs, path_ptrs;
    for (std::size_t i = 0; i < paths.size(); ++i) {
      name_ptrs.push_back(names[i].c_str());
      path_ptrs.push_back(paths[i].c_str());
    }
    return finish(wqe_cmd_report(path_ptrs.data(), name_ptrs.data(), paths.size(), report_out.c_str()), "report");
  }
  return 1;
}
