#include "wqe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "wqe/error.hpp"
#include "wqe/rng.hpp"

namespace wqe {

namespace {

// Cumulative confusion counts at each distinct threshold, highest first.
struct ThresholdStep {
  double threshold;
  std::uint64_t true_positives;
  std::uint64_t predicted;
};

struct Sweep {
  std::vector<ThresholdStep> steps;
  std::uint64_t positives = 0;
};

Sweep sweep(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeMismatch("scores and labels differ in length (" + std::to_string(scores.size()) + " vs " +
                        std::to_string(labels.size()) + ")");
  }
  Sweep out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw InvalidInput("score " + std::to_string(i) + " is NaN");
    out.positives += labels[i] != 0 ? 1 : 0;
  }
  if (out.positives == 0) throw NoPositives("no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::uint64_t tp = 0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double value = scores[order[k]];
    while (k < order.size() && scores[order[k]] == value) {
      tp += labels[order[k]] != 0 ? 1 : 0;
      ++k;
    }
    out.steps.push_back({value, tp, static_cast<std::uint64_t>(k)});
  }
  return out;
}

double f1_of(std::uint64_t tp, std::uint64_t predicted, std::uint64_t positives) {
  const std::uint64_t denom = predicted + positives;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const auto s = sweep(scores, labels);
  double ap = 0.0;
  std::uint64_t prev_tp = 0;
  for (const auto& step : s.steps) {
    if (step.true_positives != prev_tp) {
      const double precision = static_cast<double>(step.true_positives) / static_cast<double>(step.predicted);
      ap += precision * static_cast<double>(step.true_positives - prev_tp) / static_cast<double>(s.positives);
      prev_tp = step.true_positives;
    }
  }
  return ap;
}

OptimalF1 optimal_f1(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const auto s = sweep(scores, labels);
  // F1 = 2 tp / (predicted + positives); compare as exact fractions.
  const ThresholdStep* best = nullptr;
  for (const auto& step : s.steps) {
    if (best == nullptr ||
        step.true_positives * (best->predicted + s.positives) >= best->true_positives * (step.predicted + s.positives)) {
      best = &step;
    }
  }
  return {f1_of(best->true_positives, best->predicted, s.positives), best->threshold};
}

std::vector<PRPoint> pr_curve(std::span<const double> scores, std::span<const std::uint8_t> labels,
                              std::optional<std::span<const double>> grid) {
  const auto s = sweep(scores, labels);
  std::vector<PRPoint> points;
  auto point = [&](double threshold, std::uint64_t tp, std::uint64_t predicted) {
    const double precision = static_cast<double>(tp) / static_cast<double>(predicted);
    const double recall = static_cast<double>(tp) / static_cast<double>(s.positives);
    points.push_back({threshold, precision, recall, f1_of(tp, predicted, s.positives)});
  };
  if (!grid) {
    for (auto it = s.steps.rbegin(); it != s.steps.rend(); ++it) point(it->threshold, it->true_positives, it->predicted);
    return points;
  }
  std::vector<double> thresholds(grid->begin(), grid->end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  for (double theta : thresholds) {
    // Last step whose threshold is still >= theta.
    const ThresholdStep* hit = nullptr;
    for (const auto& step : s.steps) {
      if (step.threshold >= theta) hit = &step;
      else break;
    }
    if (hit != nullptr) point(theta, hit->true_positives, hit->predicted);
  }
  return points;
}

double binary_f1(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> gold) {
  if (predictions.size() != gold.size()) throw ShapeMismatch("binary_f1: length mismatch");
  std::uint64_t tp = 0, predicted = 0, positives = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool p = predictions[i] != 0;
    const bool g = gold[i] != 0;
    tp += (p && g) ? 1 : 0;
    predicted += p ? 1 : 0;
    positives += g ? 1 : 0;
  }
  if (positives == 0) throw NoPositives("binary_f1: no positive labels");
  return f1_of(tp, predicted, positives);
}

BaselineScores random_baseline(std::span<const std::uint8_t> labels, int trials, std::uint64_t seed) {
  if (trials < 1) throw InvalidInput("random_baseline: trials must be >= 1");
  if (std::none_of(labels.begin(), labels.end(), [](std::uint8_t l) { return l != 0; })) {
    throw NoPositives("random_baseline: no positive labels");
  }
  const CounterRng root(seed);
  std::vector<double> scores(labels.size());
  BaselineScores total;
  for (int t = 0; t < trials; ++t) {
    const CounterRng stream = root.split(static_cast<std::uint64_t>(t));
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = stream.uniform(i);
    total.ap += average_precision(scores, labels);
    total.f1_star += optimal_f1(scores, labels).f1;
  }
  total.ap /= trials;
  total.f1_star /= trials;
  return total;
}

double expected_random_ap(std::size_t n, std::size_t positives) {
  if (positives == 0 || positives > n) throw InvalidInput("expected_random_ap: need 1 <= positives <= n");
  if (n == 1) return 1.0;
  // E[AP] = (1/n) sum_i (1/i) (1 + (i-1)(P-1)/(n-1))
  const double p_minus = static_cast<double>(positives - 1) / static_cast<double>(n - 1);
  double total = 0.0;
  for (std::size_t i = 1; i <= n; ++i) total += (1.0 + static_cast<double>(i - 1) * p_minus) / static_cast<double>(i);
  return total / static_cast<double>(n);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t k = 0;
  while (k < order.size()) {
    std::size_t end = k;
    while (end + 1 < order.size() && values[order[end + 1]] == values[order[k]]) ++end;
    const double rank = 0.5 * static_cast<double>(k + end) + 1.0;
    for (std::size_t m = k; m <= end; ++m) ranks[order[m]] = rank;
    k = end + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeMismatch("spearman: length mismatch");
  if (a.size() < 2) throw DegenerateInput("spearman: need at least two items");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isnan(a[i]) || std::isnan(b[i])) throw InvalidInput("spearman: NaN input");
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;  // average ranks always have this mean
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean;
    const double db = rb[i] - mean;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) throw DegenerateInput("spearman: constant input");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidInput("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return percentile(std::move(values), 0.5); }

SubsetCorrelations subset_correlations(std::span<const double> scores, std::span<const LabelVector> label_sets,
                                       std::size_t subset_size, unsigned threads) {
  const std::size_t total = label_sets.size();
  if (subset_size < 1 || subset_size > total) {
    throw InvalidInput("subset_correlations: subset size " + std::to_string(subset_size) + " outside [1, " +
                       std::to_string(total) + "]");
  }
  for (const auto& set : label_sets) {
    if (set.size() != scores.size()) throw ShapeMismatch("subset_correlations: label set length differs from scores");
  }

  SubsetCorrelations out;
  std::vector<std::size_t> combo(subset_size);
  std::iota(combo.begin(), combo.end(), 0);
  while (true) {
    out.subsets.push_back(combo);
    // Advance to the next combination in lexicographic order.
    std::size_t i = subset_size;
    while (i > 0 && combo[i - 1] == total - subset_size + (i - 1)) --i;
    if (i == 0) break;
    ++combo[i - 1];
    for (std::size_t j = i; j < subset_size; ++j) combo[j] = combo[j - 1] + 1;
  }

  out.per_subset.resize(out.subsets.size());
  auto evaluate = [&](std::size_t index) {
    std::vector<double> counts(scores.size(), 0.0);
    for (auto a : out.subsets[index]) {
      for (std::size_t t = 0; t < counts.size(); ++t) counts[t] += label_sets[a][t] != 0 ? 1.0 : 0.0;
    }
    try {
      out.per_subset[index] = spearman(scores, counts);
    } catch (const DegenerateInput&) {
      out.per_subset[index] = std::nullopt;
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(out.subsets.size())));
  if (workers == 1) {
    for (std::size_t k = 0; k < out.subsets.size(); ++k) evaluate(k);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < out.subsets.size(); k += workers) evaluate(k);
      });
    }
  }

  std::vector<double> valid;
  for (const auto& r : out.per_subset) {
    if (r) valid.push_back(*r);
    else ++out.degenerate;
  }
  if (valid.empty()) throw DegenerateInput("subset_correlations: every subset is degenerate");
  out.median = median(valid);
  if (out.subsets.size() < kPercentileBoundMinSubsets) {
    out.lower = *std::min_element(valid.begin(), valid.end());
    out.upper = *std::max_element(valid.begin(), valid.end());
  } else {
    out.lower = percentile(valid, 0.025);
    out.upper = percentile(valid, 0.975);
  }
  return out;
}

HumanAgreement human_agreement(std::span<const LabelVector> label_sets, Diagnostics* diagnostics) {
  if (label_sets.size() < 2) throw InvalidInput("human_agreement: need at least two annotators");
  for (const auto& set : label_sets) {
    if (set.size() != label_sets.front().size()) throw ShapeMismatch("human_agreement: label sets differ in length");
  }
  HumanAgreement out;
  for (std::size_t g = 0; g < label_sets.size(); ++g) {
    const auto& gold = label_sets[g];
    if (std::none_of(gold.begin(), gold.end(), [](std::uint8_t l) { return l != 0; })) {
      emit(diagnostics, {Severity::warning, "no_positives", "labels", "", std::nullopt,
                         "annotator " + std::to_string(g) + " marked nothing; skipped as gold"});
      continue;
    }
    std::vector<double> aps, f1s;
    for (std::size_t a = 0; a < label_sets.size(); ++a) {
      if (a == g) continue;
      const auto& pred = label_sets[a];
      std::vector<double> as_scores(pred.begin(), pred.end());
      aps.push_back(average_precision(as_scores, gold));
      f1s.push_back(binary_f1(pred, gold));
    }
    auto accumulate_range = [](AgreementRange& r, const std::vector<double>& v) {
      r.min += *std::min_element(v.begin(), v.end());
      r.max += *std::max_element(v.begin(), v.end());
      r.avg += std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    accumulate_range(out.ap, aps);
    accumulate_range(out.f1, f1s);
    ++out.golds_used;
  }
  if (out.golds_used == 0) throw NoPositives("human_agreement: no annotator marked any error");
  const double n = static_cast<double>(out.golds_used);
  for (auto* r : {&out.ap, &out.f1}) {
    r->min /= n;
    r->avg /= n;
    r->max /= n;
  }
  return out;
}

// Layers whose AP differs by summation rounding only count as tied.
constexpr double kApTieTolerance = 1e-12;

BestLayer best_layer(std::span<const std::vector<double>> per_layer_scores, std::span<const std::uint8_t> labels) {
  if (per_layer_scores.empty()) throw InvalidInput("best_layer: no layers");
  BestLayer best{0, average_precision(per_layer_scores[0], labels)};
  for (std::size_t l = 1; l < per_layer_scores.size(); ++l) {
    const double ap = average_precision(per_layer_scores[l], labels);
    if (ap > best.ap + kApTieTolerance) best = {l, ap};
  }
  return best;
}

std::pair<std::size_t, MetricScores> best_layer(std::span<const MetricScores> per_layer_scores,
                                                std::span<const std::uint8_t> labels) {
  std::vector<std::vector<double>> values;
  for (const auto& m : per_layer_scores) values.push_back(m.values);
  const auto best = best_layer(values, labels);
  return {best.layer, per_layer_scores[best.layer]};
}

}  // namespace wqe
