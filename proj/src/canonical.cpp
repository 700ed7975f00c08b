#include "canopose/canonical.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "canopose/error.hpp"

namespace canopose {

namespace {

constexpr double kDegenerateGap = 1e-9;

bool lexicographic_less(const Mat3& l, const Mat3& r) {
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      if (l(i, j) != r(i, j)) return l(i, j) < r(i, j);
    }
  }
  return false;
}

double cloud_max_diff(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size() || a.normals.size() != b.normals.size()) {
    return std::numeric_limits<double>::infinity();
  }
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) d = std::max(d, std::abs(a.points[i][k] - b.points[i][k]));
  }
  for (std::size_t i = 0; i < a.normals.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) d = std::max(d, std::abs(a.normals[i][k] - b.normals[i][k]));
  }
  return d;
}

// min over permutations p of max_i dist(i, p[i]).
template <typename Dist>
double best_matching(Dist&& dist) {
  std::array<std::array<double, 4>, 4> cost;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) cost[i][j] = dist(i, j);
  }
  std::array<std::size_t, 4> perm{0, 1, 2, 3};
  double best = std::numeric_limits<double>::infinity();
  do {
    double worst = 0.0;
    for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, cost[i][perm[i]]);
    best = std::min(best, worst);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

const std::array<Mat3, 4>& SignMatrixSet::matrices() {
  static const std::array<Mat3, 4> kSigns{Mat3::diagonal(1, 1, 1), Mat3::diagonal(-1, -1, 1),
                                          Mat3::diagonal(-1, 1, -1), Mat3::diagonal(1, -1, -1)};
  return kSigns;
}

PrincipalFrame principal_frame(const PointCloud& cloud) {
  const EigenDecomposition eig = eigh3(covariance(cloud));
  Mat3 e = eig.vectors;
  if (determinant(e) < 0.0) e.set_column(2, e.column(2) * -1.0);
  PrincipalFrame out;
  out.frame = Frame::from_matrix(e);
  out.spectrum = eig.values;
  const double scale = std::abs(eig.values.lambda1);
  out.degenerate = eig.degenerate || scale == 0.0 ||
                   eig.values.lambda1 - eig.values.lambda2 < kDegenerateGap * scale ||
                   eig.values.lambda2 - eig.values.lambda3 < kDegenerateGap * scale;
  return out;
}

PoseSpace pose_space(const Frame& frame, const CanonicalizeOptions& options) {
  const Mat3& e = frame.matrix();
  if (!is_finite(e) || std::abs(determinant(e) - 1.0) > Frame::kTolerance ||
      orthogonality_error(e) > Frame::kTolerance) {
    throw Error(ErrorCode::NotSpecialOrthogonal, "pose space needs a det +1 frame");
  }
  const auto& signs = SignMatrixSet::matrices();
  std::array<Mat3, 4> members;
  for (std::size_t i = 0; i < 4; ++i) members[i] = e * signs[i];
  if (options.inject_sign_flip_fault) members[3] = e * signs[1];
  std::sort(members.begin(), members.end(), lexicographic_less);

  PoseSpace out;
  for (std::size_t i = 0; i < 4; ++i) out.members[i] = Frame::from_matrix(members[i]);
  return out;
}

CanonicalViews canonicalize(const PointCloud& cloud, const CanonicalizeOptions& options) {
  if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "cannot canonicalize an empty cloud");

  CanonicalViews out;
  out.center = centroid(cloud);
  PointCloud centered = cloud;
  for (auto& p : centered.points) p = p - out.center;

  const PrincipalFrame pf = principal_frame(centered);
  out.poses = pose_space(pf.frame, options);
  out.poses.spectrum = pf.spectrum;
  out.poses.degenerate = pf.degenerate;
  for (std::size_t j = 0; j < 4; ++j) out.views[j] = apply_transform(centered, out.poses.members[j].matrix());
  return out;
}

double pose_set_distance(const PoseSpace& a, const PoseSpace& b) {
  return best_matching([&](std::size_t i, std::size_t j) {
    return max_abs_diff(a.members[i].matrix(), b.members[j].matrix());
  });
}

double view_set_distance(const CanonicalViews& a, const CanonicalViews& b) {
  return best_matching([&](std::size_t i, std::size_t j) { return cloud_max_diff(a.views[i], b.views[j]); });
}

double closure_defect(const PoseSpace& space) {
  double worst = 0.0;
  for (const auto& t : SignMatrixSet::matrices()) {
    const double d = best_matching([&](std::size_t i, std::size_t j) {
      return max_abs_diff(space.members[i].matrix() * t, space.members[j].matrix());
    });
    worst = std::max(worst, d);
  }
  return worst;
}

int distinct_member_count(const PoseSpace& space, double tol) {
  int distinct = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    bool unique = true;
    for (std::size_t j = 0; j < 4; ++j) {
      if (i != j && max_abs_diff(space.members[i].matrix(), space.members[j].matrix()) <= tol) unique = false;
    }
    if (unique) ++distinct;
  }
  return distinct;
}

}  // namespace canopose
