#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "wqe/deskmodel.hpp"
#include "wqe/error.hpp"
#include "wqe/trace.hpp"

using namespace wqe;

namespace {

DeskModelConfig config(Architecture arch = Architecture::decoder_only, std::uint64_t seed = 1) {
  DeskModelConfig c;
  c.vocab_size = 20;
  c.model_dim = 12;
  c.num_layers = 3;
  c.num_heads = 3;
  c.architecture = arch;
  c.seed = seed;
  return c;
}

const std::vector<int> kSource{2, 9, 4, 17};
const std::vector<int> kTarget{5, 5, 12, 3, 19};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

TEST(DeskModel, WeightsArePureFunctionOfConfig) {
  const DeskModel a(config()), b(config()), c(config(Architecture::decoder_only, 2));
  EXPECT_EQ(a.weights_checksum(), b.weights_checksum());
  EXPECT_NE(a.weights_checksum(), c.weights_checksum());
  EXPECT_EQ(a.next_token_distribution(kSource, kTarget), b.next_token_distribution(kSource, kTarget));
  EXPECT_NE(a.next_token_distribution(kSource, kTarget), c.next_token_distribution(kSource, kTarget));
}

TEST(DeskModel, GoldenChecksum) {
  EXPECT_EQ(DeskModel(DeskModelConfig{}).weights_checksum(), 7029977831415044995ULL);
}

TEST(DeskModel, ForceDecodeIsConsistent) {
  for (auto arch : {Architecture::decoder_only, Architecture::encoder_decoder}) {
    const DeskModel m(config(arch));
    const auto t = m.force_decode("x", kSource, kTarget, 4, 9);
    EXPECT_TRUE(validate_trace(t).empty());
    EXPECT_EQ(t.model_meta.architecture, arch);
    ASSERT_EQ(t.steps.size(), kTarget.size());
    EXPECT_EQ(t.tokens.size(), kTarget.size() + 1);
    EXPECT_TRUE(t.tokens.back().is_special);
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      const auto& s = t.steps[i];
      EXPECT_EQ(s.chosen_token_id, kTarget[i]);
      EXPECT_EQ(s.layer_dists->back(), s.final_dist);
      const std::vector<int> prefix(kTarget.begin(), kTarget.begin() + static_cast<long>(i));
      const auto direct = m.next_token_distribution(kSource, prefix);
      for (std::size_t v = 0; v < direct.size(); ++v) EXPECT_NEAR(direct[v], s.final_dist[v], 1e-12);
      for (const auto& layer : *s.attention) {
        for (const auto& head : layer) EXPECT_NEAR(std::accumulate(head.begin(), head.end(), 0.0), 1.0, 1e-9);
      }
      for (double lp : *s.mcd_chosen_logprobs) EXPECT_LE(lp, 0.0);
    }
    EXPECT_EQ(t, m.force_decode("x", kSource, kTarget, 4, 9));
    EXPECT_NE(t, m.force_decode("x", kSource, kTarget, 4, 10));
  }
}

TEST(DeskModel, EncoderDecoderAttendsToSource) {
  const DeskModel m(config(Architecture::encoder_decoder));
  const auto t = m.force_decode("x", kSource, kTarget, 0, 0);
  // Cross weights over the source followed by self weights over [BOS, t0, t1].
  EXPECT_EQ(t.steps[2].attention->at(0)[0].size(), kSource.size() + 3);
  EXPECT_FALSE(t.steps[0].mcd_chosen_logprobs.has_value());
}

TEST(DeskModel, JvpIsLinearAndMatchesFiniteDifferences) {
  const DeskModel m(config());
  const auto cache = m.run(kSource, kTarget);
  const std::size_t dim = 12;
  std::vector<double> r1(dim), r2(dim), zero(dim, 0.0);
  for (std::size_t d = 0; d < dim; ++d) {
    r1[d] = std::sin(1.0 + d);
    r2[d] = std::cos(3.0 * d);
  }
  for (int layer = 0; layer < 3; ++layer) {
    for (std::size_t step = 0; step < kTarget.size(); ++step) {
      const auto j1 = m.layer_jvp(cache, step, layer, r1);
      const auto j2 = m.layer_jvp(cache, step, layer, r2);
      std::vector<double> mix(dim);
      for (std::size_t d = 0; d < dim; ++d) mix[d] = 2.0 * r1[d] - 0.5 * r2[d];
      const auto jm = m.layer_jvp(cache, step, layer, mix);
      for (std::size_t d = 0; d < dim; ++d) EXPECT_NEAR(jm[d], 2.0 * j1[d] - 0.5 * j2[d], 1e-10);
      for (double v : m.layer_jvp(cache, step, layer, zero)) EXPECT_EQ(v, 0.0);

      const auto x = m.layer_input(cache, step, layer);
      const auto fx = m.layer_apply(cache, step, layer, x);
      EXPECT_EQ(fx, cache.hidden[static_cast<std::size_t>(layer) + 1][cache.position_of_step(step)]);
      const double h = 1e-5;
      std::vector<double> plus(x), minus(x);
      for (std::size_t d = 0; d < dim; ++d) {
        plus[d] += h * r1[d];
        minus[d] -= h * r1[d];
      }
      const auto a = m.layer_apply(cache, step, layer, plus), b = m.layer_apply(cache, step, layer, minus);
      for (std::size_t d = 0; d < dim; ++d) EXPECT_NEAR((a[d] - b[d]) / (2 * h), j1[d], 1e-6);
      EXPECT_GT(dot(j1, j1), 0.0);
    }
  }
}

TEST(DeskModel, RejectsBadConfigAndIds) {
  auto c = config();
  c.model_dim = 10;  // not divisible by 3 heads
  EXPECT_THROW(DeskModel{c}, InvalidConfig);
  c = config();
  c.dropout_p = 1.0;
  EXPECT_THROW(DeskModel{c}, InvalidConfig);
  c = config();
  c.vocab_size = 100;
  EXPECT_THROW(DeskModel{c}, InvalidConfig);

  const DeskModel m(config());
  const std::vector<int> bad{2, 20};
  EXPECT_THROW(m.force_decode("x", bad, kTarget, 0, 0), InvalidInput);
  EXPECT_THROW(m.force_decode("x", kSource, bad, 0, 0), InvalidInput);
  const auto cache = m.run(kSource, kTarget);
  EXPECT_THROW(m.layer_input(cache, 0, 3), InvalidInput);
  EXPECT_THROW(m.layer_input(cache, kTarget.size(), 0), InvalidInput);
}

TEST(DeskText, RenderedTokensCoverText) {
  const auto text = render_desk_text(kTarget);
  ASSERT_EQ(text.tokens.size(), kTarget.size() + 1);
  for (std::size_t i = 0; i + 1 < text.tokens.size(); ++i) {
    const auto& tok = text.tokens[i];
    EXPECT_EQ(text.text.substr(tok.char_start, tok.char_end - tok.char_start), tok.token_string);
    EXPECT_EQ(tok.token_string, desk_piece(kTarget[i]));
  }
}
