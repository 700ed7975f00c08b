#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace canopose {

enum class ErrorCode {
  EmptyCloud,
  InvalidMatrix,
  NotSpecialOrthogonal,
  InvalidBound,
  DegenerateInput,
  NeighborhoodTooLarge,
  BranchShapeMismatch,
  ShapeMismatch,
  BadLabel,
  BadFusionMode,
  BadClass,
  ParseError,
  InconsistentColumns,
  DegenerateMesh,
  CheckpointMismatch,
  InvalidConfig,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above; the
/// message starts with the code name so CLI output stays greppable.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace canopose
