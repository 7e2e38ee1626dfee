#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <unistd.h>

#include "oracles.hpp"
#include "wqe/deskmodel.hpp"
#include "wqe/error.hpp"
#include "wqe/metrics.hpp"

using namespace wqe;

namespace {

// Trace with hand-set distributions; tokens are irrelevant to the metrics.
GenerationTrace hand_trace(int layers, int heads, int vocab, std::size_t steps) {
  GenerationTrace t;
  t.segment_id = "h";
  t.model_meta = {layers, heads, vocab, Architecture::decoder_only};
  const std::vector<double> uniform(static_cast<std::size_t>(vocab), 1.0 / vocab);
  for (std::size_t i = 0; i < steps; ++i) {
    StepRecord s;
    s.chosen_token_id = 0;
    s.final_dist = uniform;
    s.layer_dists = std::vector<std::vector<double>>(static_cast<std::size_t>(layers), uniform);
    s.attention = std::vector<std::vector<std::vector<double>>>(
        static_cast<std::size_t>(layers), std::vector<std::vector<double>>(static_cast<std::size_t>(heads), {1.0}));
    t.steps.push_back(std::move(s));
  }
  return t;
}

std::vector<double> random_dist(std::mt19937_64& gen, std::size_t n, double zero_rate = 0.0) {
  std::uniform_real_distribution<double> u;
  std::vector<double> p(n);
  double total = 0.0;
  for (auto& x : p) {
    x = u(gen) < zero_rate ? 0.0 : -std::log(1.0 - u(gen));
    total += x;
  }
  if (total == 0.0) p[0] = total = 1.0;
  for (auto& x : p) x /= total;
  return p;
}

DeskModelConfig config(double dropout = 0.1, std::uint64_t seed = 4) {
  DeskModelConfig c;
  c.vocab_size = 16;
  c.model_dim = 8;
  c.num_layers = 3;
  c.num_heads = 2;
  c.dropout_p = dropout;
  c.seed = seed;
  return c;
}

GenerationTrace desk_trace(const DeskModel& m, std::uint64_t k, int passes = 10) {
  std::mt19937_64 gen(k);
  std::uniform_int_distribution<int> id(kFirstWordId, m.config().vocab_size - 1), len(3, 7);
  std::vector<int> src(static_cast<std::size_t>(len(gen))), tgt(static_cast<std::size_t>(len(gen)));
  for (auto& x : src) x = id(gen);
  for (auto& x : tgt) x = id(gen);
  return m.force_decode("seg" + std::to_string(k), src, tgt, passes, 11);
}

double oracle_entropy_bits(const std::vector<double>& p) {
  double h = 0;
  for (double x : p) h += x > 0 ? -x * std::log(x) / std::numbers::ln2 : 0.0;
  return h;
}

double oracle_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double kl = 0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] > 0) kl += p[v] * (std::log(p[v]) - std::log(std::max(q[v], 1e-12)));
  }
  return kl;
}

}  // namespace

TEST(Surprisal, Examples) {
  auto t = hand_trace(2, 1, 2, 2);
  t.steps[0].final_dist = {1.0, 0.0};
  t.steps[1].final_dist = {std::exp(-2.0), 1.0 - std::exp(-2.0)};
  const auto s = surprisal(t);
  EXPECT_EQ(s.metric_id, "surprisal");
  EXPECT_DOUBLE_EQ(s.values[0], 0.0);
  EXPECT_NEAR(s.values[1], 2.0, 1e-12);
}

TEST(Surprisal, ZeroProbabilityIsFlooredWithWarning) {
  auto t = hand_trace(2, 1, 2, 1);
  t.steps[0].final_dist = {0.0, 1.0};
  Diagnostics d;
  const auto s = surprisal(t, &d);
  EXPECT_NEAR(s.values[0], -std::log(1e-12), 1e-9);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].severity, Severity::warning);
}

TEST(Entropy, Examples) {
  auto t = hand_trace(1, 1, 4, 2);
  t.steps[0].final_dist = {0, 1, 0, 0};
  const auto h = output_entropy(t);
  EXPECT_EQ(h.values[0], 0.0);
  EXPECT_NEAR(h.values[1], 2.0, 1e-12);
}

TEST(Entropy, MatchesNaiveSumOnRandomDistributions) {
  std::mt19937_64 gen(8);
  for (int k = 0; k < 200; ++k) {
    const auto p = random_dist(gen, 32, k % 3 == 0 ? 0.3 : 0.0);
    const double h = entropy_bits(p);
    EXPECT_NEAR(h, oracle_entropy_bits(p), 1e-9);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 5.0 + 1e-12);
  }
}

TEST(Kl, Examples) {
  const std::vector<double> p{1, 0}, q{0.5, 0.5};
  EXPECT_NEAR(kl_divergence_nats(p, q), std::numbers::ln2, 1e-12);
  EXPECT_EQ(kl_divergence_nats(q, q), 0.0);
  const std::vector<double> zero_q{0.0, 1.0};
  EXPECT_NEAR(kl_divergence_nats(q, zero_q), 0.5 * std::log(0.5 / 1e-12) + 0.5 * std::log(0.5), 1e-9);
}

TEST(Kl, MatchesNaiveSumOnRandomPairs) {
  std::mt19937_64 gen(9);
  for (int k = 0; k < 200; ++k) {
    const auto p = random_dist(gen, 16, 0.2), q = random_dist(gen, 16, k % 4 == 0 ? 0.2 : 0.0);
    const double kl = kl_divergence_nats(p, q);
    EXPECT_NEAR(kl, oracle_kl(p, q), 1e-9);
    EXPECT_GE(kl, 0.0);
  }
}

TEST(Mcd, Examples) {
  auto t = hand_trace(1, 1, 2, 2);
  t.steps[0].mcd_chosen_logprobs = std::vector<double>{0.0, -2.0};
  t.steps[1].mcd_chosen_logprobs = std::vector<double>{-0.7, -0.7, -0.7};
  const auto [avg, var] = mcd_stats(t, 2);
  EXPECT_EQ(avg.metric_id, "mcd_avg");
  EXPECT_EQ(var.metric_id, "mcd_var");
  EXPECT_DOUBLE_EQ(avg.values[0], 1.0);
  EXPECT_DOUBLE_EQ(var.values[0], 1.0);
  EXPECT_DOUBLE_EQ(avg.values[1], 0.7);
  EXPECT_EQ(var.values[1], 0.0);
}

TEST(Mcd, MissingOrShortSamples) {
  auto t = hand_trace(1, 1, 2, 1);
  EXPECT_THROW(mcd_stats(t, 2), MetricUnavailable);
  t.steps[0].mcd_chosen_logprobs = std::vector<double>{-1.0, -2.0};
  EXPECT_THROW(mcd_stats(t, 3), MetricUnavailable);
  EXPECT_THROW(mcd_stats(t, 1), InvalidInput);
}

TEST(LogitLens, Examples) {
  auto t = hand_trace(3, 1, 3, 2);
  t.steps[0].final_dist = {0.2, 0.5, 0.3};
  t.steps[0].layer_dists->at(1) = t.steps[0].final_dist;
  t.steps[0].layer_dists->at(2) = {std::exp(-1.0), 1.0 - std::exp(-1.0), 0.0};
  const auto ll = logitlens_surprisal(t);
  ASSERT_EQ(ll.size(), 3u);
  EXPECT_EQ(ll[1].metric_id, "ll_surprisal[l=1]");
  EXPECT_EQ(ll[1].values[0], surprisal(t).values[0]);
  EXPECT_NEAR(ll[2].values[0], 1.0, 1e-12);
  const auto kl = logitlens_kl(t);
  EXPECT_EQ(kl[1].values[0], 0.0);
  EXPECT_EQ(kl[0].metric_id, "ll_kl[l=0]");

  t.steps[1].layer_dists.reset();
  EXPECT_THROW(logitlens_surprisal(t), MetricUnavailable);
  EXPECT_THROW(logitlens_kl(t), MetricUnavailable);
  EXPECT_THROW(prediction_depth(t), MetricUnavailable);
}

TEST(PredictionDepth, Examples) {
  auto t = hand_trace(3, 1, 3, 3);
  for (auto& s : t.steps) s.chosen_token_id = 1;
  for (auto& d : *t.steps[0].layer_dists) d = {0.2, 0.6, 0.2};   // top everywhere
  for (auto& d : *t.steps[1].layer_dists) d = {0.6, 0.2, 0.2};   // top nowhere
  *t.steps[2].layer_dists = {{0.6, 0.2, 0.2}, {0.1, 0.2, 0.7}, {0.1, 0.8, 0.1}};
  const auto d = prediction_depth(t);
  EXPECT_EQ(d.values, (std::vector<double>{0.0, 3.0, 2.0}));
}

TEST(PredictionDepth, TiesBreakTowardLowestIndex) {
  auto t = hand_trace(2, 1, 3, 2);
  t.steps[0].chosen_token_id = 0;
  t.steps[1].chosen_token_id = 2;
  for (auto& s : t.steps) *s.layer_dists = {{0.4, 0.2, 0.4}, {0.1, 0.1, 0.8}};
  Diagnostics diags;
  const auto d = prediction_depth(t, &diags);
  EXPECT_EQ(d.values, (std::vector<double>{0.0, 1.0}));
  ASSERT_EQ(diags.size(), 2u);
  EXPECT_EQ(diags[0].rule, "argmax_tie");
  EXPECT_EQ(diags[1].step, 1u);
}

TEST(PredictionDepth, MatchingPrefixNeverIncreasesDepth) {
  std::mt19937_64 gen(12);
  for (int k = 0; k < 200; ++k) {
    const int layers = 1 + k % 4;
    auto t = hand_trace(layers, 1, 5, 1);
    t.steps[0].chosen_token_id = static_cast<int>(gen() % 5);
    for (auto& d : *t.steps[0].layer_dists) d = random_dist(gen, 5);
    const double before = prediction_depth(t).values[0];
    EXPECT_GE(before, 0.0);
    EXPECT_LE(before, layers);
    auto longer = t;
    std::vector<double> onehot(5, 0.0);
    onehot[static_cast<std::size_t>(t.steps[0].chosen_token_id)] = 1.0;
    longer.steps[0].layer_dists->insert(longer.steps[0].layer_dists->begin(), onehot);
    longer.model_meta.num_layers += 1;
    EXPECT_LE(prediction_depth(longer).values[0], before);
  }
}

TEST(AttentionEntropy, Examples) {
  auto t = hand_trace(4, 2, 3, 2);
  for (auto& s : t.steps) {
    for (auto& layer : *s.attention) {
      for (auto& head : layer) head = {0.25, 0.25, 0.25, 0.25};
    }
  }
  t.steps[1].attention->at(2)[1] = {0.0, 1.0, 0.0, 0.0};
  const auto [avg, max] = attention_entropy(t);
  EXPECT_NEAR(avg.values[0], 2.0, 1e-12);
  EXPECT_NEAR(max.values[0], 2.0, 1e-12);
  EXPECT_NEAR(avg.values[1], 1.75, 1e-12);
  EXPECT_NEAR(max.values[1], 2.0, 1e-12);
  t.steps[0].attention.reset();
  EXPECT_THROW(attention_entropy(t), MetricUnavailable);
}

TEST(DeskMetrics, MatchRecomputationOracles) {
  const DeskModel m(config());
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto t = desk_trace(m, k);
    const auto s = surprisal(t);
    const auto h = output_entropy(t);
    const auto [avg, var] = mcd_stats(t, 10);
    const auto ll = logitlens_surprisal(t);
    const auto kl = logitlens_kl(t);
    const auto depth = prediction_depth(t);
    const auto [att_avg, att_max] = attention_entropy(t);
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      const auto& st = t.steps[i];
      const auto c = static_cast<std::size_t>(st.chosen_token_id);
      EXPECT_NEAR(s.values[i], -std::log(st.final_dist[c]), 1e-9);
      EXPECT_NEAR(h.values[i], oracle_entropy_bits(st.final_dist), 1e-9);
      EXPECT_LE(h.values[i], std::log2(16.0) + 1e-12);

      std::vector<double> neg;
      for (double lp : *st.mcd_chosen_logprobs) neg.push_back(-lp);
      double mean = 0;
      for (double x : neg) mean += x / 10.0;
      EXPECT_NEAR(avg.values[i], mean, 1e-9);
      EXPECT_NEAR(var.values[i], oracle::two_pass_variance(neg), 1e-9);

      double expected_depth = 3;
      for (std::size_t l = 0; l < 3; ++l) {
        const auto& p = st.layer_dists->at(l);
        EXPECT_NEAR(ll[l].values[i], -std::log(p[c]), 1e-9);
        EXPECT_NEAR(kl[l].values[i], oracle_kl(p, st.final_dist), 1e-9);
        const auto top = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        if (expected_depth == 3 && top == c) expected_depth = static_cast<double>(l);
      }
      EXPECT_EQ(depth.values[i], expected_depth);

      double total = 0, highest = 0;
      for (const auto& layer : *st.attention) {
        for (const auto& head : layer) {
          const double e = oracle_entropy_bits(head);
          total += e;
          highest = std::max(highest, e);
          EXPECT_LE(e, std::log2(static_cast<double>(head.size())) + 1e-12);
        }
      }
      EXPECT_NEAR(att_avg.values[i], total / 6.0, 1e-9);
      EXPECT_NEAR(att_max.values[i], highest, 1e-9);
    }
  }
}

TEST(DeskMetrics, ZeroDropoutGivesZeroVariance) {
  const DeskModel m(config(0.0));
  const auto t = desk_trace(m, 3);
  for (double v : mcd_stats(t).var.values) EXPECT_EQ(v, 0.0);
}

TEST(DeskMetrics, HigherDropoutRaisesMeanVariance) {
  double previous = -1.0;
  for (double p : {0.0, 0.05, 0.1, 0.2, 0.35}) {
    const DeskModel m(config(p));
    double total = 0;
    std::size_t steps = 0;
    for (std::uint64_t k = 0; k < 40; ++k) {
      for (double v : mcd_stats(desk_trace(m, k)).var.values) {
        total += v;
        ++steps;
      }
    }
    ASSERT_GE(steps, 100u);
    const double mean = total / static_cast<double>(steps);
    EXPECT_GE(mean, previous) << "p=" << p;
    previous = mean;
  }
}

TEST(Blood, LinearMaps) {
  const CounterRng rng(5);
  const JvpFn identity = [](std::span<const double> r) { return std::vector<double>(r.begin(), r.end()); };
  const JvpFn twice = [](std::span<const double> r) {
    std::vector<double> out(r.begin(), r.end());
    for (auto& x : out) x *= 2.0;
    return out;
  };
  EXPECT_NEAR(blood_score(identity, 8, 20, rng), 1.0, 1e-12);
  EXPECT_NEAR(blood_score(twice, 8, 20, rng), 4.0, 1e-12);
  EXPECT_THROW(blood_score(identity, 8, 0, rng), InvalidInput);
}

TEST(Blood, DeskModelMatchesFiniteDifferences) {
  auto c = config();
  c.num_layers = 2;
  const DeskModel m(c);
  const auto t = desk_trace(m, 2, 0);
  const auto scores = blood(t, &m);
  ASSERT_EQ(scores.size(), 1u);
  EXPECT_EQ(scores[0].metric_id, "blood[l=0]");
  const auto cache = m.run(t.desk->source_ids, t.desk->target_ids);
  const CounterRng segment_rng = CounterRng(c.seed).split(hash_string(t.segment_id));
  const double h = 1e-5;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const auto x = m.layer_input(cache, i, 1);
    const JvpFn fd = [&](std::span<const double> r) {
      std::vector<double> plus(x), minus(x);
      for (std::size_t d = 0; d < x.size(); ++d) {
        plus[d] += h * r[d];
        minus[d] -= h * r[d];
      }
      auto a = m.layer_apply(cache, i, 1, plus);
      const auto b = m.layer_apply(cache, i, 1, minus);
      for (std::size_t d = 0; d < a.size(); ++d) a[d] = (a[d] - b[d]) / (2 * h);
      return a;
    };
    const double expected = blood_score(fd, x.size(), kBloodProbes, segment_rng.split(i));
    EXPECT_NEAR(scores[0].values[i], expected, 1e-4) << "step " << i;
  }
}

TEST(Blood, StoredScoresPassThrough) {
  auto t = hand_trace(3, 1, 2, 2);
  t.steps[0].blood_layer_scores = std::vector<double>{0.5, 1.5};
  EXPECT_THROW(blood(t), MetricUnavailable);
  t.steps[1].blood_layer_scores = std::vector<double>{2.5, 3.5};
  const auto b = blood(t);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1].values, (std::vector<double>{1.5, 3.5}));
}

TEST(Summary, FamiliesAndDeterminism) {
  const DeskModel m(config());
  const auto t = desk_trace(m, 6);
  const auto a = summarize(t, {}, &m);
  const auto b = summarize(t);
  EXPECT_EQ(a, b);
  const auto families = scores_from_summary(a);
  for (const char* f : kMetricFamilies) EXPECT_TRUE(families.count(f)) << f;
  EXPECT_EQ(families.at("ll_kl").size(), 3u);
  EXPECT_EQ(families.at("blood").size(), 2u);
  EXPECT_EQ(families.at("surprisal")[0].values, surprisal(t).values);

  ScoreOptions no_blood;
  no_blood.include_blood = false;
  EXPECT_FALSE(scores_from_summary(summarize(t, no_blood)).count("blood"));
}

TEST(Summary, MetricIdHelpers) {
  EXPECT_EQ(metric_family_of("ll_kl[l=3]"), "ll_kl");
  EXPECT_EQ(metric_family_of("surprisal"), "surprisal");
  EXPECT_EQ(metric_layer_of("blood[l=12]"), 12u);
  EXPECT_FALSE(metric_layer_of("blood[l=]"));
  EXPECT_FALSE(metric_layer_of("entropy"));
  EXPECT_TRUE(is_per_layer_family("ll_surprisal"));
  EXPECT_FALSE(is_per_layer_family("entropy"));
  EXPECT_FALSE(is_metric_family("xcomet_conf"));
}

TEST(ScoresFile, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / ("wqe_test_scores_" + std::to_string(getpid()));
  std::filesystem::create_directories(dir);
  const std::vector<MetricScores> scores{{"surprisal", "a", {0.1, 1e-300, 3.0}}, {"surprisal", "b", {}}};
  save_scores(scores, dir / "s.jsonl");
  EXPECT_EQ(load_scores(dir / "s.jsonl"), scores);
  std::filesystem::remove_all(dir);
}
