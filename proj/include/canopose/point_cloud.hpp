#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "canopose/linalg3.hpp"

namespace canopose {

struct PointCloud {
  std::vector<Vec3> points;
  /// Either empty or one unit normal per point.
  std::vector<Vec3> normals;
  std::optional<int> label;
  /// Set when a non-rigid transform dropped the normals.
  bool normals_stale = false;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }

  /// Throws EmptyCloud / InvalidMatrix / ShapeMismatch on violated invariants.
  void validate() const;
};

}  // namespace canopose
