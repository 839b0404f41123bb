#include "pnmf/error.hpp"

namespace pnmf {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::WriteRejected: return "WriteRejected";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::StateError: return "StateError";
    case ErrorCode::TrainingDiverged: return "TrainingDiverged";
    case ErrorCode::ScheduleMismatch: return "ScheduleMismatch";
    case ErrorCode::TargetContractError: return "TargetContractError";
    case ErrorCode::DependencyError: return "DependencyError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace pnmf
