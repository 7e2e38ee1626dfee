#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wqe/diagnostics.hpp"
#include "wqe/rng.hpp"
#include "wqe/trace.hpp"

namespace wqe {

class DeskModel;

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr int kDefaultMcdPasses = 10;
inline constexpr int kBloodProbes = 20;

// Per-token scores of one metric for one segment. Every metric is oriented so
// that a higher value means "more likely an error". Surprisal-type scores and
// KL are in nats, entropies in bits.
struct MetricScores {
  std::string metric_id;
  std::string segment_id;
  std::vector<double> values;

  friend bool operator==(const MetricScores&, const MetricScores&) = default;
};

// Metric families in report order. Per-layer families expand to
// "<family>[l=<k>]" metric ids.
inline constexpr std::array<const char*, 10> kMetricFamilies = {
    "surprisal", "entropy",   "mcd_avg", "mcd_var", "ll_surprisal", "ll_kl", "pred_depth",
    "attn_entropy_avg", "attn_entropy_max", "blood"};

bool is_metric_family(std::string_view name) noexcept;
bool is_per_layer_family(std::string_view family) noexcept;
std::string layer_metric_id(std::string_view family, std::size_t layer);
// "ll_kl[l=3]" -> "ll_kl"; ids without a layer suffix are returned unchanged.
std::string metric_family_of(std::string_view metric_id);
std::optional<std::size_t> metric_layer_of(std::string_view metric_id);

// Base-2 entropy with 0 log 0 = 0.
double entropy_bits(std::span<const double> p) noexcept;
// KL(p || q) in nats; q is floored at kProbabilityFloor where p > 0.
double kl_divergence_nats(std::span<const double> p, std::span<const double> q) noexcept;

MetricScores surprisal(const GenerationTrace& trace, Diagnostics* diagnostics = nullptr);
MetricScores output_entropy(const GenerationTrace& trace);

struct McdScores {
  MetricScores avg;
  MetricScores var;
};
// Mean and population variance of -log p(t*) over the first `passes` samples.
McdScores mcd_stats(const GenerationTrace& trace, int passes = kDefaultMcdPasses);

std::vector<MetricScores> logitlens_surprisal(const GenerationTrace& trace, Diagnostics* diagnostics = nullptr);
std::vector<MetricScores> logitlens_kl(const GenerationTrace& trace);
// First layer whose logit-lens argmax is t*; num_layers when none is.
MetricScores prediction_depth(const GenerationTrace& trace, Diagnostics* diagnostics = nullptr);

struct AttentionEntropyScores {
  MetricScores avg;
  MetricScores max;
};
AttentionEntropyScores attention_entropy(const GenerationTrace& trace);

// Hutchinson-style estimate (1/K) sum_k ||J r_k||^2 with unit-norm Gaussian probes.
using JvpFn = std::function<std::vector<double>(std::span<const double>)>;
double blood_score(const JvpFn& jvp, std::size_t dim, int probes, const CounterRng& rng);

// One MetricScores per layer boundary l -> l+1. Uses stored scores when the
// trace carries them, otherwise recomputes them with the desk model (built
// from the trace's provenance when `model` is null).
std::vector<MetricScores> blood(const GenerationTrace& trace, const DeskModel* model = nullptr,
                                int probes = kBloodProbes);

struct ScoreOptions {
  int mcd_passes = kDefaultMcdPasses;
  int blood_probes = kBloodProbes;
  bool include_blood = true;
};

// All metrics available from a full trace, as a summary trace.
SummaryTrace summarize(const GenerationTrace& trace, const ScoreOptions& options = {},
                       const DeskModel* model = nullptr, Diagnostics* diagnostics = nullptr);

// Scores per metric family; families with no data in the summary are absent.
std::map<std::string, std::vector<MetricScores>> scores_from_summary(const SummaryTrace& summary);

// Scores file: one JSON object per line {segment_id, metric_id, values}.
void save_scores(std::span<const MetricScores> scores, const std::filesystem::path& path);
std::vector<MetricScores> load_scores(const std::filesystem::path& path);
std::string serialize_scores(std::span<const MetricScores> scores);

}  // namespace wqe
