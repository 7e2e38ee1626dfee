#include "wqe/diagnostics.hpp"

#include "json.hpp"
#include <sstream>

#include "wqe/error.hpp"

namespace wqe {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_input: return "InvalidInput";
    case ErrorCode::shape_mismatch: return "ShapeMismatch";
    case ErrorCode::parse_error: return "ParseError";
    case ErrorCode::version_error: return "VersionError";
    case ErrorCode::no_positives: return "NoPositives";
    case ErrorCode::degenerate_input: return "DegenerateInput";
    case ErrorCode::metric_unavailable: return "MetricUnavailable";
    case ErrorCode::alignment_error: return "AlignmentError";
    case ErrorCode::invalid_config: return "InvalidConfig";
    case ErrorCode::io_error: return "IoError";
  }
  return "Unknown";
}

const char* severity_name(Severity s) noexcept {
  switch (s) {
    case Severity::info: return "info";
    case Severity::warning: return "warning";
    case Severity::error: return "error";
  }
  return "error";
}

std::string Diagnostic::to_json() const {
  nlohmann::json j;
  j["severity"] = severity_name(severity);
  j["rule"] = rule;
  j["field"] = field;
  j["segment_id"] = segment_id;
  j["step"] = step ? nlohmann::json(*step) : nlohmann::json(nullptr);
  j["message"] = message;
  return j.dump();
}

std::string Diagnostic::to_text() const {
  std::ostringstream os;
  os << severity_name(severity) << ": [" << rule << "] segment " << segment_id;
  if (step) os << " step " << *step;
  if (!field.empty()) os << " field " << field;
  if (!message.empty()) os << ": " << message;
  return os.str();
}

}  // namespace wqe
