#include "wqe/supervised.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "wqe/error.hpp"
#include "wqe/jsonl.hpp"

namespace wqe {

namespace {

void check_rows(const TokenClassProbs& probs) {
  if (probs.probs.size() != count_scored_tokens(probs.scorer_tokens)) {
    throw ShapeMismatch("segment " + probs.segment_id + ": " + std::to_string(probs.probs.size()) +
                        " probability rows for " + std::to_string(count_scored_tokens(probs.scorer_tokens)) +
                        " scorer tokens");
  }
  for (std::size_t i = 0; i < probs.probs.size(); ++i) {
    const auto& row = probs.probs[i];
    double sum = 0.0;
    for (double p : row) {
      if (!std::isfinite(p) || p < 0.0) {
        throw InvalidInput("segment " + probs.segment_id + " row " + std::to_string(i) + ": negative or non-finite probability");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > kClassRowTolerance) {
      throw InvalidInput("segment " + probs.segment_id + " row " + std::to_string(i) + ": probabilities sum to " +
                         std::to_string(sum));
    }
  }
}

}  // namespace

MetricScores xcomet_conf(const TokenClassProbs& probs) {
  check_rows(probs);
  MetricScores out{"xcomet_conf", probs.segment_id, {}};
  for (const auto& row : probs.probs) out.values.push_back(row[1] + row[2] + row[3]);
  return out;
}

TokenLabels xcomet_binary(const TokenClassProbs& probs, Diagnostics* diagnostics) {
  check_rows(probs);
  TokenLabels out{probs.segment_id, {}, "xcomet"};
  for (std::size_t i = 0; i < probs.probs.size(); ++i) {
    const auto& row = probs.probs[i];
    const double top_error = std::max({row[1], row[2], row[3]});
    if (top_error == row[0]) {
      emit(diagnostics, {Severity::info, "argmax_tie", "probs", probs.segment_id, i,
                         "ok tied with an error class; labelled as error"});
    }
    out.labels.push_back(top_error >= row[0] ? 1 : 0);
  }
  return out;
}

MetricScores project_scores(const MetricScores& scores, std::span<const TokenSpan> from_tokens,
                            std::span<const TokenSpan> to_tokens, Diagnostics* diagnostics) {
  std::vector<const TokenSpan*> sources;
  for (const auto& t : from_tokens) {
    if (!t.is_special) sources.push_back(&t);
  }
  if (sources.size() != scores.values.size()) {
    throw ShapeMismatch("project_scores: " + std::to_string(scores.values.size()) + " scores for " +
                        std::to_string(sources.size()) + " source tokens");
  }
  MetricScores out{scores.metric_id, scores.segment_id, {}};
  bool any_overlap = false;
  std::size_t targets = 0;
  for (std::size_t k = 0; k < to_tokens.size(); ++k) {
    const auto& t = to_tokens[k];
    if (t.is_special) continue;
    ++targets;
    bool hit = false;
    double best = 0.0;
    for (std::size_t s = 0; s < sources.size(); ++s) {
      if (sources[s]->char_start < t.char_end && t.char_start < sources[s]->char_end) {
        best = hit ? std::max(best, scores.values[s]) : scores.values[s];
        hit = true;
      }
    }
    if (!hit) {
      emit(diagnostics, {Severity::warning, "no_overlap", "tokens", scores.segment_id, out.values.size(),
                         "target token '" + t.token_string + "' overlaps no source token; scored 0"});
    }
    any_overlap = any_overlap || hit;
    out.values.push_back(hit ? best : 0.0);
  }
  if (!any_overlap && targets > 0 && !sources.empty()) {
    throw AlignmentError("project_scores: tokenizations of segment " + scores.segment_id +
                         " cover disjoint text");
  }
  return out;
}

std::vector<TokenClassProbs> load_class_probs(const std::filesystem::path& path) {
  std::vector<TokenClassProbs> out;
  for (const auto& line : jsonl::split_lines(jsonl::read_text(path))) {
    if (line.text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line.text);
      TokenClassProbs r;
      r.segment_id = j.at("segment_id").get<std::string>();
      for (const auto& tj : j.at("tokens")) {
        r.scorer_tokens.push_back({tj.at("text").get<std::string>(), tj.at("start").get<std::size_t>(),
                                   tj.at("end").get<std::size_t>(), false});
      }
      for (const auto& row : j.at("probs")) {
        const auto v = row.get<std::vector<double>>();
        if (v.size() != 4) throw ParseError("probability rows must have 4 entries");
        r.probs.push_back({v[0], v[1], v[2], v[3]});
      }
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line.number) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(line.number) + ": " + e.what());
    }
  }
  return out;
}

void save_class_probs(std::span<const TokenClassProbs> records, const std::filesystem::path& path) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json tokens = nlohmann::json::array();
    for (const auto& t : r.scorer_tokens) {
      if (t.is_special) continue;
      tokens.push_back({{"text", t.token_string}, {"start", t.char_start}, {"end", t.char_end}});
    }
    nlohmann::json probs = nlohmann::json::array();
    for (const auto& row : r.probs) probs.push_back({row[0], row[1], row[2], row[3]});
    out += nlohmann::json{{"segment_id", r.segment_id}, {"tokens", tokens}, {"probs", probs}}.dump();
    out += '\n';
  }
  jsonl::write_text(path, out);
}

}  // namespace wqe
