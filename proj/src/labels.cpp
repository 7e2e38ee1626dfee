#include "wqe/labels.hpp"

#include <algorithm>

#include "wqe/error.hpp"
#include "wqe/utf8.hpp"

namespace wqe {

const char* severity_label(ErrorSeverity s) noexcept {
  switch (s) {
    case ErrorSeverity::unspecified: return "unspecified";
    case ErrorSeverity::minor: return "minor";
    case ErrorSeverity::major: return "major";
    case ErrorSeverity::critical: return "critical";
  }
  return "unspecified";
}

ErrorSeverity parse_severity(std::string_view name) {
  if (name.empty() || name == "unspecified") return ErrorSeverity::unspecified;
  if (name == "minor") return ErrorSeverity::minor;
  if (name == "major") return ErrorSeverity::major;
  if (name == "critical") return ErrorSeverity::critical;
  throw InvalidInput("unknown severity '" + std::string(name) + "'");
}

namespace {

struct Word {
  std::u32string text;
  std::size_t start = 0;
  std::size_t end = 0;
};

std::vector<Word> split_words(const std::u32string& text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && utf8::is_space(text[i])) ++i;
    if (i == text.size()) break;
    const std::size_t start = i;
    while (i < text.size() && !utf8::is_space(text[i])) ++i;
    words.push_back({text.substr(start, i - start), start, i});
  }
  return words;
}

}  // namespace

std::vector<TokenSpan> whitespace_tokens(std::string_view text) {
  std::vector<TokenSpan> tokens;
  for (auto& w : split_words(utf8::decode(text))) {
    tokens.push_back({utf8::encode(w.text), w.start, w.end, false});
  }
  return tokens;
}

std::size_t count_scored_tokens(std::span<const TokenSpan> tokens) noexcept {
  return static_cast<std::size_t>(
      std::count_if(tokens.begin(), tokens.end(), [](const TokenSpan& t) { return !t.is_special; }));
}

std::vector<ErrorSpan> normalize_spans(std::vector<ErrorSpan> spans) {
  std::sort(spans.begin(), spans.end(), [](const ErrorSpan& a, const ErrorSpan& b) {
    return a.char_start != b.char_start ? a.char_start < b.char_start : a.char_end < b.char_end;
  });
  std::vector<ErrorSpan> merged;
  for (auto& s : spans) {
    if (!merged.empty() && s.char_start <= merged.back().char_end) {
      auto& last = merged.back();
      last.char_end = std::max(last.char_end, s.char_end);
      last.severity = std::max(last.severity, s.severity);
    } else {
      merged.push_back(std::move(s));
    }
  }
  return merged;
}

std::vector<ErrorSpan> spans_from_edits(std::string_view mt_text, std::string_view post_edit,
                                        const std::string& annotator_id) {
  if (mt_text.empty()) throw InvalidInput("spans_from_edits: empty MT text");
  const std::u32string mt = utf8::decode(mt_text);
  const std::u32string pe = utf8::decode(post_edit);
  const auto mt_words = split_words(mt);
  const auto pe_words = split_words(pe);
  const std::size_t n = mt_words.size();
  const std::size_t m = pe_words.size();

  if (n == 0) {
    if (m == 0) return {};
    return {ErrorSpan{0, mt.size(), ErrorSeverity::unspecified, annotator_id}};
  }

  // suffix[i][j] = LCS length of mt_words[i:] and pe_words[j:]
  std::vector<std::vector<std::uint32_t>> suffix(n + 1, std::vector<std::uint32_t>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      suffix[i][j] = mt_words[i].text == pe_words[j].text
                         ? suffix[i + 1][j + 1] + 1
                         : std::max(suffix[i + 1][j], suffix[i][j + 1]);
    }
  }

  std::vector<bool> changed(n, false);
  // An insertion seen before any MT word has been consumed attaches forward.
  bool pending_leading_insert = false;
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < n || j < m) {
    if (i < n && j < m && mt_words[i].text == pe_words[j].text && suffix[i][j] == suffix[i + 1][j + 1] + 1) {
      if (pending_leading_insert) {
        changed[i] = true;
        pending_leading_insert = false;
      }
      ++i;
      ++j;
    } else if (i < n && (j == m || suffix[i + 1][j] >= suffix[i][j + 1])) {
      changed[i] = true;
      pending_leading_insert = false;
      ++i;
    } else {
      if (i == 0) {
        pending_leading_insert = true;
      } else {
        changed[i - 1] = true;
      }
      ++j;
    }
  }

  std::vector<ErrorSpan> spans;
  for (std::size_t k = 0; k < n;) {
    if (!changed[k]) {
      ++k;
      continue;
    }
    std::size_t last = k;
    while (last + 1 < n && changed[last + 1]) ++last;
    spans.push_back({mt_words[k].start, mt_words[last].end, ErrorSeverity::unspecified, annotator_id});
    k = last + 1;
  }
  return spans;
}

TokenLabels align_spans_to_tokens(std::span<const ErrorSpan> spans, std::span<const TokenSpan> tokens,
                                  std::size_t text_length, const std::string& segment_id,
                                  const std::string& annotator_id) {
  for (const auto& s : spans) {
    if (s.char_start >= s.char_end || s.char_end > text_length) {
      throw InvalidInput("span [" + std::to_string(s.char_start) + ", " + std::to_string(s.char_end) +
                         ") outside text of length " + std::to_string(text_length));
    }
  }
  TokenLabels out{segment_id, {}, annotator_id};
  out.labels.reserve(tokens.size());
  std::size_t prev_end = 0;
  for (const auto& t : tokens) {
    if (t.is_special) continue;
    if (t.char_start >= t.char_end || t.char_start < prev_end) {
      throw InvalidInput("tokens must be ordered, non-overlapping and non-empty (token '" + t.token_string + "')");
    }
    prev_end = t.char_end;
    bool hit = false;
    for (const auto& s : spans) {
      if (s.char_start < t.char_end && t.char_start < s.char_end) {
        hit = true;
        break;
      }
    }
    out.labels.push_back(hit ? 1 : 0);
  }
  return out;
}

EditCounts aggregate_edit_counts(std::span<const TokenLabels> label_sets) {
  if (label_sets.empty()) throw InvalidInput("aggregate_edit_counts: no label sets");
  const auto& first = label_sets.front();
  EditCounts out{first.segment_id, std::vector<int>(first.labels.size(), 0),
                 static_cast<int>(label_sets.size())};
  for (const auto& set : label_sets) {
    if (set.labels.size() != first.labels.size()) {
      throw ShapeMismatch("aggregate_edit_counts: annotator '" + set.annotator_id + "' has " +
                          std::to_string(set.labels.size()) + " labels, expected " +
                          std::to_string(first.labels.size()));
    }
    if (set.segment_id != first.segment_id) {
      throw ShapeMismatch("aggregate_edit_counts: mixed segments '" + first.segment_id + "' and '" +
                          set.segment_id + "'");
    }
    for (std::size_t i = 0; i < set.labels.size(); ++i) out.counts[i] += set.labels[i] != 0 ? 1 : 0;
  }
  return out;
}

}  // namespace wqe
