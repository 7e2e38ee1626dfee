#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wqe {

enum class ErrorSeverity { unspecified, minor, major, critical };

const char* severity_label(ErrorSeverity s) noexcept;
ErrorSeverity parse_severity(std::string_view name);

// Offsets are Unicode scalar-value indices into the MT text, end exclusive.
struct ErrorSpan {
  std::size_t char_start = 0;
  std::size_t char_end = 0;
  ErrorSeverity severity = ErrorSeverity::unspecified;
  std::string annotator_id;

  friend bool operator==(const ErrorSpan&, const ErrorSpan&) = default;
};

struct TokenSpan {
  std::string token_string;
  std::size_t char_start = 0;
  std::size_t char_end = 0;
  bool is_special = false;

  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct TokenLabels {
  std::string segment_id;
  std::vector<std::uint8_t> labels;  // one per non-special token
  std::string annotator_id;
};

struct EditCounts {
  std::string segment_id;
  std::vector<int> counts;
  int num_annotators = 0;
};

// Splits on Unicode whitespace; one TokenSpan per word.
std::vector<TokenSpan> whitespace_tokens(std::string_view text);

std::size_t count_scored_tokens(std::span<const TokenSpan> tokens) noexcept;

// Sorts spans and merges the ones that overlap or touch. Severity of a merged
// span is the maximum of its parts.
std::vector<ErrorSpan> normalize_spans(std::vector<ErrorSpan> spans);

// Word-level LCS diff of mt_text against post_edit. Replaced or deleted MT words
// become spans; pure insertions attach to the preceding MT word (the following
// one at sentence start). Consecutive changed words merge into one span.
std::vector<ErrorSpan> spans_from_edits(std::string_view mt_text, std::string_view post_edit,
                                        const std::string& annotator_id);

// A token is labelled 1 iff at least one of its characters lies inside a span.
// Special tokens are dropped from the output.
TokenLabels align_spans_to_tokens(std::span<const ErrorSpan> spans, std::span<const TokenSpan> tokens,
                                  std::size_t text_length, const std::string& segment_id = {},
                                  const std::string& annotator_id = {});

EditCounts aggregate_edit_counts(std::span<const TokenLabels> label_sets);

}  // namespace wqe
