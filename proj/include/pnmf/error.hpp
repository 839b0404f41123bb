#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pnmf {

enum class ErrorCode {
  WriteRejected,
  IoError,
  FormatError,
  CorruptFile,
  ParseError,
  EmptyClass,
  ShapeError,
  DegenerateInput,
  ZeroVector,
  DegenerateVariance,
  BadConfig,
  StateError,
  TrainingDiverged,
  ScheduleMismatch,
  TargetContractError,
  DependencyError,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; callers dispatch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace pnmf
