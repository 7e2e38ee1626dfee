#include "wqe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "json.hpp"
#include "wqe/deskmodel.hpp"
#include "wqe/error.hpp"
#include "wqe/jsonl.hpp"

namespace wqe {

namespace {

MetricScores make_scores(std::string metric_id, const GenerationTrace& trace) {
  MetricScores s{std::move(metric_id), trace.segment_id, {}};
  s.values.reserve(trace.steps.size());
  return s;
}

std::size_t chosen_index(const StepRecord& step) { return static_cast<std::size_t>(step.chosen_token_id); }

double floored_surprisal(double p, const std::string& segment_id, std::size_t step, const char* field,
                         Diagnostics* diagnostics) {
  if (p < kProbabilityFloor) {
    emit(diagnostics, {Severity::warning, "probability_floor", field, segment_id, step,
                       "p(t*) below floor; clamped to 1e-12"});
    p = kProbabilityFloor;
  }
  return -std::log(p);
}

void require_layers(const GenerationTrace& trace) {
  for (const auto& s : trace.steps) {
    if (!s.layer_dists) throw MetricUnavailable("segment " + trace.segment_id + ": no logit-lens distributions");
  }
}

std::size_t argmax_lowest(std::span<const double> p, bool* tied) {
  std::size_t best = 0;
  *tied = false;
  for (std::size_t v = 1; v < p.size(); ++v) {
    if (p[v] > p[best]) {
      best = v;
      *tied = false;
    } else if (p[v] == p[best]) {
      *tied = true;
    }
  }
  return best;
}

}  // namespace

bool is_metric_family(std::string_view name) noexcept {
  return std::any_of(kMetricFamilies.begin(), kMetricFamilies.end(), [&](const char* f) { return name == f; });
}

bool is_per_layer_family(std::string_view family) noexcept {
  return family == "ll_surprisal" || family == "ll_kl" || family == "blood";
}

std::string layer_metric_id(std::string_view family, std::size_t layer) {
  return std::string(family) + "[l=" + std::to_string(layer) + "]";
}

std::string metric_family_of(std::string_view metric_id) {
  const auto bracket = metric_id.find("[l=");
  return std::string(bracket == std::string_view::npos ? metric_id : metric_id.substr(0, bracket));
}

std::optional<std::size_t> metric_layer_of(std::string_view metric_id) {
  const auto bracket = metric_id.find("[l=");
  if (bracket == std::string_view::npos || metric_id.back() != ']') return std::nullopt;
  const auto digits = metric_id.substr(bracket + 3, metric_id.size() - bracket - 4);
  if (digits.empty()) return std::nullopt;
  std::size_t layer = 0;
  for (char c : digits) {
    if (c < '0' || c > '9') return std::nullopt;
    layer = layer * 10 + static_cast<std::size_t>(c - '0');
  }
  return layer;
}

double entropy_bits(std::span<const double> p) noexcept {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log2(x);
  }
  return std::max(h, 0.0);
}

double kl_divergence_nats(std::span<const double> p, std::span<const double> q) noexcept {
  double kl = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] <= 0.0) continue;
    kl += p[v] * std::log(p[v] / std::max(q[v], kProbabilityFloor));
  }
  return std::max(kl, 0.0);
}

MetricScores surprisal(const GenerationTrace& trace, Diagnostics* diagnostics) {
  auto out = make_scores("surprisal", trace);
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& s = trace.steps[i];
    out.values.push_back(floored_surprisal(s.final_dist.at(chosen_index(s)), trace.segment_id, i, "final_dist",
                                           diagnostics));
  }
  return out;
}

MetricScores output_entropy(const GenerationTrace& trace) {
  auto out = make_scores("entropy", trace);
  for (const auto& s : trace.steps) out.values.push_back(entropy_bits(s.final_dist));
  return out;
}

McdScores mcd_stats(const GenerationTrace& trace, int passes) {
  if (passes < 2) throw InvalidInput("mcd_stats: need at least 2 passes");
  McdScores out{make_scores("mcd_avg", trace), make_scores("mcd_var", trace)};
  for (const auto& s : trace.steps) {
    if (!s.mcd_chosen_logprobs || s.mcd_chosen_logprobs->size() < static_cast<std::size_t>(passes)) {
      throw MetricUnavailable("segment " + trace.segment_id + ": fewer than " + std::to_string(passes) +
                              " dropout samples");
    }
    // Welford accumulation over -log p.
    double mean = 0.0;
    double m2 = 0.0;
    for (int t = 0; t < passes; ++t) {
      const double x = -(*s.mcd_chosen_logprobs)[static_cast<std::size_t>(t)];
      const double delta = x - mean;
      mean += delta / (t + 1);
      m2 += delta * (x - mean);
    }
    out.avg.values.push_back(mean);
    out.var.values.push_back(std::max(m2 / passes, 0.0));
  }
  return out;
}

std::vector<MetricScores> logitlens_surprisal(const GenerationTrace& trace, Diagnostics* diagnostics) {
  require_layers(trace);
  const auto layers = static_cast<std::size_t>(trace.model_meta.num_layers);
  std::vector<MetricScores> out;
  for (std::size_t l = 0; l < layers; ++l) {
    auto scores = make_scores(layer_metric_id("ll_surprisal", l), trace);
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
      const auto& s = trace.steps[i];
      scores.values.push_back(floored_surprisal(s.layer_dists->at(l).at(chosen_index(s)), trace.segment_id, i,
                                                "layer_dists", diagnostics));
    }
    out.push_back(std::move(scores));
  }
  return out;
}

std::vector<MetricScores> logitlens_kl(const GenerationTrace& trace) {
  require_layers(trace);
  const auto layers = static_cast<std::size_t>(trace.model_meta.num_layers);
  std::vector<MetricScores> out;
  for (std::size_t l = 0; l < layers; ++l) {
    auto scores = make_scores(layer_metric_id("ll_kl", l), trace);
    for (const auto& s : trace.steps) scores.values.push_back(kl_divergence_nats(s.layer_dists->at(l), s.final_dist));
    out.push_back(std::move(scores));
  }
  return out;
}

MetricScores prediction_depth(const GenerationTrace& trace, Diagnostics* diagnostics) {
  require_layers(trace);
  const auto layers = static_cast<std::size_t>(trace.model_meta.num_layers);
  auto out = make_scores("pred_depth", trace);
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& s = trace.steps[i];
    std::size_t depth = layers;
    for (std::size_t l = 0; l < layers; ++l) {
      bool tied = false;
      const auto top = argmax_lowest(s.layer_dists->at(l), &tied);
      if (tied) {
        emit(diagnostics, {Severity::info, "argmax_tie", "layer_dists[" + std::to_string(l) + "]", trace.segment_id, i,
                           "tied argmax resolved toward the lowest vocabulary index"});
      }
      if (top == chosen_index(s)) {
        depth = l;
        break;
      }
    }
    out.values.push_back(static_cast<double>(depth));
  }
  return out;
}

AttentionEntropyScores attention_entropy(const GenerationTrace& trace) {
  AttentionEntropyScores out{make_scores("attn_entropy_avg", trace), make_scores("attn_entropy_max", trace)};
  for (const auto& s : trace.steps) {
    if (!s.attention) throw MetricUnavailable("segment " + trace.segment_id + ": no attention weights");
    double total = 0.0;
    double highest = 0.0;
    std::size_t heads = 0;
    for (const auto& layer : *s.attention) {
      for (const auto& head : layer) {
        const double h = entropy_bits(head);
        total += h;
        highest = std::max(highest, h);
        ++heads;
      }
    }
    if (heads == 0) throw MetricUnavailable("segment " + trace.segment_id + ": empty attention record");
    out.avg.values.push_back(total / static_cast<double>(heads));
    out.max.values.push_back(highest);
  }
  return out;
}

double blood_score(const JvpFn& jvp, std::size_t dim, int probes, const CounterRng& rng) {
  if (probes < 1 || dim == 0) throw InvalidInput("blood_score: need at least one probe and a non-empty state");
  double total = 0.0;
  std::vector<double> probe(dim);
  for (int k = 0; k < probes; ++k) {
    const CounterRng stream = rng.split(static_cast<std::uint64_t>(k));
    double norm2 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      probe[d] = stream.normal(d);
      norm2 += probe[d] * probe[d];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : probe) x *= inv;
    const auto image = jvp(probe);
    double sq = 0.0;
    for (double x : image) sq += x * x;
    total += sq;
  }
  return total / probes;
}

std::vector<MetricScores> blood(const GenerationTrace& trace, const DeskModel* model, int probes) {
  const auto layers = static_cast<std::size_t>(std::max(trace.model_meta.num_layers, 0));
  const std::size_t boundaries = layers > 0 ? layers - 1 : 0;
  std::vector<MetricScores> out;
  for (std::size_t b = 0; b < boundaries; ++b) out.push_back(make_scores(layer_metric_id("blood", b), trace));

  const bool stored = !trace.steps.empty() && std::all_of(trace.steps.begin(), trace.steps.end(),
                                                          [](const StepRecord& s) { return s.blood_layer_scores.has_value(); });
  if (stored) {
    for (const auto& s : trace.steps) {
      if (s.blood_layer_scores->size() != boundaries) {
        throw ShapeMismatch("segment " + trace.segment_id + ": blood_layer_scores has wrong length");
      }
      for (std::size_t b = 0; b < boundaries; ++b) out[b].values.push_back((*s.blood_layer_scores)[b]);
    }
    return out;
  }
  if (trace.steps.empty()) return out;
  if (!trace.desk) {
    throw MetricUnavailable("segment " + trace.segment_id + ": no stored BLOOD scores and no desk-model provenance");
  }

  std::unique_ptr<DeskModel> owned;
  if (model == nullptr || !(model->config() == trace.desk->config)) {
    owned = std::make_unique<DeskModel>(trace.desk->config);
    model = owned.get();
  }
  const auto cache = model->run(trace.desk->source_ids, trace.desk->target_ids);
  if (cache.num_steps() != trace.steps.size()) {
    throw ShapeMismatch("segment " + trace.segment_id + ": provenance does not match the trace steps");
  }
  const auto dim = static_cast<std::size_t>(model->config().model_dim);
  const CounterRng segment_rng = CounterRng(trace.desk->config.seed).split(hash_string(trace.segment_id));
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const CounterRng step_rng = segment_rng.split(i);
    for (std::size_t b = 0; b < boundaries; ++b) {
      // Boundary b maps the logit-lens state of layer b to that of layer b+1,
      // i.e. decoder block b+1.
      const int block = static_cast<int>(b + 1);
      const JvpFn jvp = [&](std::span<const double> r) { return model->layer_jvp(cache, i, block, r); };
      out[b].values.push_back(blood_score(jvp, dim, probes, step_rng));
    }
  }
  return out;
}

SummaryTrace summarize(const GenerationTrace& trace, const ScoreOptions& options, const DeskModel* model,
                       Diagnostics* diagnostics) {
  SummaryTrace summary;
  summary.segment_id = trace.segment_id;
  summary.model_meta = trace.model_meta;
  summary.tokens = trace.tokens;
  summary.steps.resize(trace.steps.size());
  auto& steps = summary.steps;

  auto unavailable = [&](const char* family, const Error& e) {
    emit(diagnostics, {Severity::info, "metric_unavailable", family, trace.segment_id, std::nullopt, e.what()});
  };

  const auto sur = surprisal(trace, diagnostics);
  const auto ent = output_entropy(trace);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    steps[i].surprisal = sur.values[i];
    steps[i].entropy = ent.values[i];
  }
  try {
    const auto mcd = mcd_stats(trace, options.mcd_passes);
    for (std::size_t i = 0; i < steps.size(); ++i) {
      steps[i].mcd_avg = mcd.avg.values[i];
      steps[i].mcd_var = mcd.var.values[i];
    }
  } catch (const MetricUnavailable& e) {
    unavailable("mcd", e);
  }
  try {
    const auto ll = logitlens_surprisal(trace, diagnostics);
    const auto kl = logitlens_kl(trace);
    const auto depth = prediction_depth(trace, diagnostics);
    for (std::size_t i = 0; i < steps.size(); ++i) {
      steps[i].ll_surprisal.emplace();
      steps[i].ll_kl.emplace();
      for (std::size_t l = 0; l < ll.size(); ++l) {
        steps[i].ll_surprisal->push_back(ll[l].values[i]);
        steps[i].ll_kl->push_back(kl[l].values[i]);
      }
      steps[i].pred_depth = depth.values[i];
    }
  } catch (const MetricUnavailable& e) {
    unavailable("logit_lens", e);
  }
  try {
    const auto att = attention_entropy(trace);
    for (std::size_t i = 0; i < steps.size(); ++i) {
      steps[i].attn_entropy_avg = att.avg.values[i];
      steps[i].attn_entropy_max = att.max.values[i];
    }
  } catch (const MetricUnavailable& e) {
    unavailable("attention", e);
  }
  if (options.include_blood) {
    try {
      const auto bl = blood(trace, model, options.blood_probes);
      for (std::size_t i = 0; i < steps.size(); ++i) {
        steps[i].blood.emplace();
        for (const auto& per_boundary : bl) steps[i].blood->push_back(per_boundary.values[i]);
      }
    } catch (const MetricUnavailable& e) {
      unavailable("blood", e);
    }
  }
  return summary;
}

std::map<std::string, std::vector<MetricScores>> scores_from_summary(const SummaryTrace& summary) {
  std::map<std::string, std::vector<MetricScores>> out;
  const auto& steps = summary.steps;
  const auto layers = static_cast<std::size_t>(std::max(summary.model_meta.num_layers, 0));

  auto scalar = [&](const char* family, auto member) {
    if (!std::all_of(steps.begin(), steps.end(), [&](const SummaryStep& s) { return (s.*member).has_value(); })) return;
    MetricScores m{family, summary.segment_id, {}};
    for (const auto& s : steps) m.values.push_back(*(s.*member));
    out[family].push_back(std::move(m));
  };
  auto per_layer = [&](const char* family, auto member, std::size_t count) {
    if (!std::all_of(steps.begin(), steps.end(), [&](const SummaryStep& s) { return (s.*member).has_value(); })) return;
    auto& dst = out[family];
    for (std::size_t l = 0; l < count; ++l) {
      MetricScores m{layer_metric_id(family, l), summary.segment_id, {}};
      for (const auto& s : steps) {
        const auto& v = *(s.*member);
        if (v.size() != count) throw ShapeMismatch("segment " + summary.segment_id + ": " + family + " has wrong length");
        m.values.push_back(v[l]);
      }
      dst.push_back(std::move(m));
    }
  };
  scalar("surprisal", &SummaryStep::surprisal);
  scalar("entropy", &SummaryStep::entropy);
  scalar("mcd_avg", &SummaryStep::mcd_avg);
  scalar("mcd_var", &SummaryStep::mcd_var);
  per_layer("ll_surprisal", &SummaryStep::ll_surprisal, layers);
  per_layer("ll_kl", &SummaryStep::ll_kl, layers);
  scalar("pred_depth", &SummaryStep::pred_depth);
  scalar("attn_entropy_avg", &SummaryStep::attn_entropy_avg);
  scalar("attn_entropy_max", &SummaryStep::attn_entropy_max);
  per_layer("blood", &SummaryStep::blood, layers > 0 ? layers - 1 : 0);
  return out;
}

std::string serialize_scores(std::span<const MetricScores> scores) {
  std::string out;
  for (const auto& s : scores) {
    for (double v : s.values) {
      if (!std::isfinite(v)) throw InvalidInput("metric " + s.metric_id + " for segment " + s.segment_id + " is not finite");
    }
    nlohmann::json j = {{"segment_id", s.segment_id}, {"metric_id", s.metric_id}, {"values", s.values}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_scores(std::span<const MetricScores> scores, const std::filesystem::path& path) {
  jsonl::write_text(path, serialize_scores(scores));
}

std::vector<MetricScores> load_scores(const std::filesystem::path& path) {
  std::vector<MetricScores> out;
  for (const auto& line : jsonl::split_lines(jsonl::read_text(path))) {
    if (line.text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line.text);
      out.push_back({j.at("metric_id").get<std::string>(), j.at("segment_id").get<std::string>(),
                     j.at("values").get<std::vector<double>>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line.number) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace wqe
