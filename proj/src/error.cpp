#include "canopose/error.hpp"

namespace canopose {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::InvalidMatrix: return "InvalidMatrix";
    case ErrorCode::NotSpecialOrthogonal: return "NotSpecialOrthogonal";
    case ErrorCode::InvalidBound: return "InvalidBound";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::NeighborhoodTooLarge: return "NeighborhoodTooLarge";
    case ErrorCode::BranchShapeMismatch: return "BranchShapeMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadLabel: return "BadLabel";
    case ErrorCode::BadFusionMode: return "BadFusionMode";
    case ErrorCode::BadClass: return "BadClass";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::InconsistentColumns: return "InconsistentColumns";
    case ErrorCode::DegenerateMesh: return "DegenerateMesh";
    case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail)),
      code_(code) {}

}  // namespace canopose
