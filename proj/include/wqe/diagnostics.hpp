#pragma once

#include <optional>
#include <string>
#include <vector>

namespace wqe {

enum class Severity { info, warning, error };

// A non-fatal finding attached to a field of a segment (and optionally a step).
struct Diagnostic {
  Severity severity = Severity::error;
  std::string rule;
  std::string field;
  std::string segment_id;
  std::optional<std::size_t> step;
  std::string message;

  // Single-line JSON rendering, used for --json-diagnostics.
  std::string to_json() const;
  std::string to_text() const;
};

using Diagnostics = std::vector<Diagnostic>;

inline void emit(Diagnostics* sink, Diagnostic d) {
  if (sink != nullptr) sink->push_back(std::move(d));
}

const char* severity_name(Severity s) noexcept;

}  // namespace wqe
