#pragma once

#include <array>

#include "canopose/linalg3.hpp"
#include "canopose/point_cloud.hpp"

namespace canopose {

/// The four sign matrices diag(1,1,1), diag(-1,-1,1), diag(-1,1,-1),
/// diag(1,-1,-1). They form a Klein four-group under multiplication.
struct SignMatrixSet {
  static const std::array<Mat3, 4>& matrices();
};

/// Unordered set {E * T_i}. Members are stored in lexicographic order of
/// their row-major entries so serialization is reproducible; consumers must
/// not attach meaning to the order.
struct PoseSpace {
  std::array<Frame, 4> members;
  Spectrum spectrum;
  bool degenerate = false;
};

struct PrincipalFrame {
  Frame frame;
  Spectrum spectrum;
  bool degenerate = false;
};

/// The centered cloud expressed in each of the four pose frames.
struct CanonicalViews {
  std::array<PointCloud, 4> views;
  PoseSpace poses;
  Vec3 center;
};

/// Fault injection for the invariance battery's negative control. Never set
/// outside tests.
struct CanonicalizeOptions {
  /// Replaces T_4 with a copy of T_2, which breaks closure and invariance.
  bool inject_sign_flip_fault = false;
};

/// Covariance eigenvectors ordered by descending eigenvalue, third column
/// negated if needed so det = +1. Degenerate inputs are flagged, not rejected.
PrincipalFrame principal_frame(const PointCloud& cloud);

PoseSpace pose_space(const Frame& frame, const CanonicalizeOptions& options = {});

CanonicalViews canonicalize(const PointCloud& cloud, const CanonicalizeOptions& options = {});

/// Minimum over the 4! member pairings of the largest entrywise difference.
double pose_set_distance(const PoseSpace& a, const PoseSpace& b);

/// Same matching over views: largest coordinate (and normal) difference under
/// the best pairing. Infinite when point counts differ.
double view_set_distance(const CanonicalViews& a, const CanonicalViews& b);

/// Largest set distance between S and {E_i * T_j} over all j. Zero for a
/// correct pose space since sign flips are exact in floating point.
double closure_defect(const PoseSpace& space);

/// Number of members that differ from every other member by more than `tol`.
int distinct_member_count(const PoseSpace& space, double tol = 1e-6);

}  // namespace canopose
