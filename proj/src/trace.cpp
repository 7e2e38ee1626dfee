#include "wqe/trace.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "wqe/error.hpp"

namespace wqe {

const char* architecture_name(Architecture a) noexcept {
  return a == Architecture::decoder_only ? "decoder_only" : "encoder_decoder";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "decoder_only") return Architecture::decoder_only;
  if (name == "encoder_decoder") return Architecture::encoder_decoder;
  throw InvalidConfig("unknown architecture '" + std::string(name) + "'");
}

void DeskModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw InvalidConfig("desk model: " + what); };
  if (vocab_size < 4 || vocab_size > 64) fail("vocab_size must be in [4, 64]");
  if (model_dim < 1 || model_dim > 32) fail("model_dim must be in [1, 32]");
  if (num_layers < 1 || num_layers > 4) fail("num_layers must be in [1, 4]");
  if (num_heads < 1 || num_heads > 4) fail("num_heads must be in [1, 4]");
  if (model_dim % num_heads != 0) fail("model_dim must be divisible by num_heads");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must be in [0, 1)");
}

namespace {

class Checker {
 public:
  explicit Checker(const std::string& segment_id) : segment_id_(segment_id) {}

  void add(std::string rule, std::string field, std::optional<std::size_t> step, std::string message) {
    out_.push_back({Severity::error, std::move(rule), std::move(field), segment_id_, step, std::move(message)});
  }

  // Reports at most one problem for a probability vector.
  void distribution(std::span<const double> p, std::size_t expected_size, const std::string& field,
                    std::optional<std::size_t> step) {
    if (expected_size != 0 && p.size() != expected_size) {
      add("shape", field, step, "expected length " + std::to_string(expected_size) + ", got " + std::to_string(p.size()));
      return;
    }
    if (p.empty()) {
      add("shape", field, step, "empty distribution");
      return;
    }
    for (std::size_t v = 0; v < p.size(); ++v) {
      if (!std::isfinite(p[v]) || p[v] < 0.0) {
        add("probability_range", field, step, "entry " + std::to_string(v) + " is negative or not finite");
        return;
      }
    }
    const double sum = std::accumulate(p.begin(), p.end(), 0.0);
    if (std::abs(sum - 1.0) > kDistributionTolerance) {
      std::ostringstream os;
      os.precision(10);
      os << "distribution not normalized (sum " << sum << ")";
      add("normalization", field, step, os.str());
    }
  }

  void finite_values(std::span<const double> v, const std::string& field, std::optional<std::size_t> step,
                     bool non_negative) {
    for (double x : v) {
      if (!std::isfinite(x) || (non_negative && x < 0.0)) {
        add("value_range", field, step, non_negative ? "values must be finite and non-negative" : "values must be finite");
        return;
      }
    }
  }

  void meta(const ModelMeta& m) {
    if (m.num_layers < 1 || m.num_heads < 1 || m.vocab_size < 1) {
      add("model_meta", "model_meta", std::nullopt, "num_layers, num_heads and vocab_size must be >= 1");
    }
  }

  void tokens(std::span<const TokenSpan> tokens) {
    std::size_t prev_end = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto& t = tokens[i];
      if (t.is_special) continue;
      if (t.char_start >= t.char_end || t.char_start < prev_end) {
        add("token_order", "tokens[" + std::to_string(i) + "]", std::nullopt,
            "non-special tokens must be non-empty, ordered and non-overlapping");
        return;
      }
      prev_end = t.char_end;
    }
  }

  void step_count(std::size_t steps, std::span<const TokenSpan> tokens) {
    const auto scored = count_scored_tokens(tokens);
    if (steps != scored) {
      add("step_count", "steps", std::nullopt,
          "expected " + std::to_string(scored) + " steps (one per non-special token), got " + std::to_string(steps));
    }
  }

  Diagnostics take() { return std::move(out_); }

 private:
  std::string segment_id_;
  Diagnostics out_;
};

}  // namespace

Diagnostics validate_trace(const GenerationTrace& trace) {
  Checker check(trace.segment_id);
  const auto& meta = trace.model_meta;
  check.meta(meta);
  check.tokens(trace.tokens);
  check.step_count(trace.steps.size(), trace.tokens);
  const auto layers = static_cast<std::size_t>(std::max(meta.num_layers, 0));
  const auto heads = static_cast<std::size_t>(std::max(meta.num_heads, 0));
  const auto vocab = static_cast<std::size_t>(std::max(meta.vocab_size, 0));

  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& s = trace.steps[i];
    if (s.chosen_token_id < 0 || static_cast<std::size_t>(s.chosen_token_id) >= vocab) {
      check.add("token_id_range", "chosen_token_id", i, "token id outside vocabulary");
    }
    check.distribution(s.final_dist, vocab, "final_dist", i);
    if (s.layer_dists) {
      if (s.layer_dists->size() != layers) {
        check.add("shape", "layer_dists", i,
                  "expected " + std::to_string(layers) + " layer distributions, got " + std::to_string(s.layer_dists->size()));
      } else {
        for (std::size_t l = 0; l < layers; ++l) {
          check.distribution((*s.layer_dists)[l], vocab, "layer_dists[" + std::to_string(l) + "]", i);
        }
      }
    }
    if (s.attention) {
      const auto& att = *s.attention;
      bool shaped = att.size() == layers;
      for (const auto& per_layer : att) shaped = shaped && per_layer.size() == heads;
      if (!shaped) {
        check.add("shape", "attention", i,
                  "expected " + std::to_string(layers) + " x " + std::to_string(heads) + " attention vectors");
      } else {
        for (std::size_t l = 0; l < layers; ++l) {
          for (std::size_t h = 0; h < heads; ++h) {
            check.distribution(att[l][h], 0, "attention[" + std::to_string(l) + "][" + std::to_string(h) + "]", i);
          }
        }
      }
    }
    if (s.mcd_chosen_logprobs) {
      const auto& mcd = *s.mcd_chosen_logprobs;
      if (mcd.size() < 2) {
        check.add("shape", "mcd_chosen_logprobs", i, "need at least 2 dropout samples");
      } else {
        for (double lp : mcd) {
          if (!std::isfinite(lp) || lp > 0.0) {
            check.add("value_range", "mcd_chosen_logprobs", i, "log-probabilities must be finite and <= 0");
            break;
          }
        }
      }
    }
    if (s.blood_layer_scores) {
      const std::size_t expected = layers > 0 ? layers - 1 : 0;
      if (s.blood_layer_scores->size() != expected) {
        check.add("shape", "blood_layer_scores", i, "expected " + std::to_string(expected) + " layer-boundary scores");
      } else {
        check.finite_values(*s.blood_layer_scores, "blood_layer_scores", i, true);
      }
    }
  }
  return check.take();
}

Diagnostics validate_trace(const SummaryTrace& trace) {
  Checker check(trace.segment_id);
  const auto& meta = trace.model_meta;
  check.meta(meta);
  check.tokens(trace.tokens);
  check.step_count(trace.steps.size(), trace.tokens);
  const auto layers = static_cast<std::size_t>(std::max(meta.num_layers, 0));

  // A metric must be present on every step or on none.
  auto coverage = [&](const char* name, auto member) {
    std::size_t present = 0;
    for (const auto& s : trace.steps) present += (s.*member).has_value() ? 1 : 0;
    if (present != 0 && present != trace.steps.size()) {
      check.add("metric_coverage", name, std::nullopt, "metric present on only some steps");
    }
  };
  coverage("surprisal", &SummaryStep::surprisal);
  coverage("entropy", &SummaryStep::entropy);
  coverage("mcd_avg", &SummaryStep::mcd_avg);
  coverage("mcd_var", &SummaryStep::mcd_var);
  coverage("ll_surprisal", &SummaryStep::ll_surprisal);
  coverage("ll_kl", &SummaryStep::ll_kl);
  coverage("pred_depth", &SummaryStep::pred_depth);
  coverage("attn_entropy_avg", &SummaryStep::attn_entropy_avg);
  coverage("attn_entropy_max", &SummaryStep::attn_entropy_max);
  coverage("blood", &SummaryStep::blood);

  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& s = trace.steps[i];
    auto scalar = [&](const char* name, const std::optional<double>& v, bool non_negative) {
      if (v) check.finite_values(std::span<const double>(&*v, 1), name, i, non_negative);
    };
    scalar("surprisal", s.surprisal, true);
    scalar("entropy", s.entropy, true);
    scalar("mcd_avg", s.mcd_avg, true);
    scalar("mcd_var", s.mcd_var, true);
    scalar("attn_entropy_avg", s.attn_entropy_avg, true);
    scalar("attn_entropy_max", s.attn_entropy_max, true);
    if (s.pred_depth && (!(*s.pred_depth >= 0.0) || *s.pred_depth > static_cast<double>(layers) ||
                         std::floor(*s.pred_depth) != *s.pred_depth)) {
      check.add("value_range", "pred_depth", i, "prediction depth must be an integer in [0, num_layers]");
    }
    auto per_layer = [&](const char* name, const std::optional<std::vector<double>>& v, std::size_t expected) {
      if (!v) return;
      if (v->size() != expected) {
        check.add("shape", name, i, "expected " + std::to_string(expected) + " per-layer values");
      } else {
        check.finite_values(*v, name, i, true);
      }
    };
    per_layer("ll_surprisal", s.ll_surprisal, layers);
    per_layer("ll_kl", s.ll_kl, layers);
    per_layer("blood", s.blood, layers > 0 ? layers - 1 : 0);
  }
  return check.take();
}

Diagnostics validate_traces(const TraceFile& file) {
  Diagnostics all;
  auto append = [&all](Diagnostics d) { all.insert(all.end(), d.begin(), d.end()); };
  if (file.kind == TraceKind::full) {
    for (const auto& t : file.full) append(validate_trace(t));
  } else {
    for (const auto& t : file.summary) append(validate_trace(t));
  }
  return all;
}

}  // namespace wqe
