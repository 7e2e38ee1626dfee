#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wqe/diagnostics.hpp"
#include "wqe/metrics.hpp"

namespace wqe {

// Binary labels pooled over segments (1 = error).
using LabelVector = std::vector<std::uint8_t>;

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct OptimalF1 {
  double f1 = 0.0;
  double threshold = 0.0;
};

// Predictions are "score >= threshold"; all items sharing a score value form a
// single threshold step, so tied scores never receive partial credit.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Best F1 over every distinct score threshold; the smallest threshold wins ties.
OptimalF1 optimal_f1(std::span<const double> scores, std::span<const std::uint8_t> labels);

// One point per distinct score (or per grid value when `grid` is given), in
// ascending threshold order. Thresholds that predict nothing are omitted.
std::vector<PRPoint> pr_curve(std::span<const double> scores, std::span<const std::uint8_t> labels,
                              std::optional<std::span<const double>> grid = std::nullopt);

// F1 of fixed binary predictions.
double binary_f1(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> gold);

struct BaselineScores {
  double ap = 0.0;
  double f1_star = 0.0;
};

// Mean AP and F1* of `trials` uniform-random score vectors.
BaselineScores random_baseline(std::span<const std::uint8_t> labels, int trials = 1000, std::uint64_t seed = 0);

// Closed-form expectation of AP under a uniformly random ranking of n items
// with `positives` positives.
double expected_random_ap(std::size_t n, std::size_t positives);

// Fractional (average) ranks, 1-based.
std::vector<double> average_ranks(std::span<const double> values);

// Pearson correlation of average ranks. Throws DegenerateInput for constant input.
double spearman(std::span<const double> a, std::span<const double> b);

struct SubsetCorrelations {
  double median = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::vector<std::vector<std::size_t>> subsets;  // annotator indices, lexicographic
  std::vector<std::optional<double>> per_subset;  // nullopt where the subset was degenerate
  std::size_t degenerate = 0;
};

inline constexpr std::size_t kPercentileBoundMinSubsets = 40;

// Spearman between `scores` and edit counts of every size-L subset of the
// label sets. Bounds are the 2.5/97.5 percentiles, or min/max when there are
// fewer than 40 subsets. `threads` > 1 evaluates subsets concurrently.
SubsetCorrelations subset_correlations(std::span<const double> scores, std::span<const LabelVector> label_sets,
                                       std::size_t subset_size, unsigned threads = 1);

// Linear-interpolation percentile (q in [0, 1]) of unsorted values.
double percentile(std::vector<double> values, double q);
double median(std::vector<double> values);

struct AgreementRange {
  double min = 0.0;
  double avg = 0.0;
  double max = 0.0;
};

struct HumanAgreement {
  AgreementRange ap;
  AgreementRange f1;
  std::size_t golds_used = 0;
};

// Each annotator in turn is gold; every other annotator's binary labels are
// scored against it. min/avg/max over predictors, then averaged over golds.
HumanAgreement human_agreement(std::span<const LabelVector> label_sets, Diagnostics* diagnostics = nullptr);

struct BestLayer {
  std::size_t layer = 0;
  double ap = 0.0;
};

// Layer with the highest AP; ties go to the lowest index.
BestLayer best_layer(std::span<const std::vector<double>> per_layer_scores, std::span<const std::uint8_t> labels);
std::pair<std::size_t, MetricScores> best_layer(std::span<const MetricScores> per_layer_scores,
                                                std::span<const std::uint8_t> labels);

}  // namespace wqe
