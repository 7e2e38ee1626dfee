#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "wqe/diagnostics.hpp"
#include "wqe/labels.hpp"
#include "wqe/metrics.hpp"

namespace wqe {

// Error-class probabilities from an external span classifier, in its own
// tokenization. Class order: ok, minor, major, critical.
struct TokenClassProbs {
  std::string segment_id;
  std::vector<TokenSpan> scorer_tokens;
  std::vector<std::array<double, 4>> probs;
};

inline constexpr double kClassRowTolerance = 1e-3;

// p(minor) + p(major) + p(critical) per scorer token.
MetricScores xcomet_conf(const TokenClassProbs& probs);

// 1 where the most likely class is an error class. A tie between ok and an
// error class resolves to 1 with a diagnostic.
TokenLabels xcomet_binary(const TokenClassProbs& probs, Diagnostics* diagnostics = nullptr);

// Re-tokenizes scores: each target token takes the maximum score of the source
// tokens sharing at least one character with it.
MetricScores project_scores(const MetricScores& scores, std::span<const TokenSpan> from_tokens,
                            std::span<const TokenSpan> to_tokens, Diagnostics* diagnostics = nullptr);

// Class-probs file: {segment_id, tokens:[{text,start,end}], probs:[[ok,minor,major,critical],...]}
std::vector<TokenClassProbs> load_class_probs(const std::filesystem::path& path);
void save_class_probs(std::span<const TokenClassProbs> records, const std::filesystem::path& path);

}  // namespace wqe
