#include "canopose/point_cloud.hpp"

#include <cmath>

#include "canopose/error.hpp"

namespace canopose {

void PointCloud::validate() const {
  if (points.empty()) throw Error(ErrorCode::EmptyCloud, "cloud has no points");
  for (const auto& p : points) {
    if (!is_finite(p)) throw Error(ErrorCode::InvalidMatrix, "non-finite coordinate");
  }
  if (!normals.empty()) {
    if (normals.size() != points.size()) throw Error(ErrorCode::ShapeMismatch, "normal count != point count");
    for (const auto& n : normals) {
      if (!is_finite(n) || std::abs(norm(n) - 1.0) > 1e-6) {
        throw Error(ErrorCode::InvalidMatrix, "normal is not unit length");
      }
    }
  }
}

}  // namespace canopose
