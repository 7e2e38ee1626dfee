#pragma once

#include <stdexcept>
#include <string>

namespace wqe {

enum class ErrorCode {
  invalid_input = 1,
  shape_mismatch,
  parse_error,
  version_error,
  no_positives,
  degenerate_input,
  metric_unavailable,
  alignment_error,
  invalid_config,
  io_error,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define WQE_DEFINE_ERROR(Name, code_value)                                       \
  class Name : public Error {                                                     \
   public:                                                                        \
    explicit Name(const std::string& what) : Error(ErrorCode::code_value, what) {} \
  }

WQE_DEFINE_ERROR(InvalidInput, invalid_input);
WQE_DEFINE_ERROR(ShapeMismatch, shape_mismatch);
WQE_DEFINE_ERROR(ParseError, parse_error);
WQE_DEFINE_ERROR(VersionError, version_error);
WQE_DEFINE_ERROR(NoPositives, no_positives);
WQE_DEFINE_ERROR(DegenerateInput, degenerate_input);
WQE_DEFINE_ERROR(MetricUnavailable, metric_unavailable);
WQE_DEFINE_ERROR(AlignmentError, alignment_error);
WQE_DEFINE_ERROR(InvalidConfig, invalid_config);
WQE_DEFINE_ERROR(IoError, io_error);

#undef WQE_DEFINE_ERROR

}  // namespace wqe
