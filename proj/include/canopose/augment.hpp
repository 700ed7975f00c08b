#pragma once

#include <array>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "canopose/linalg3.hpp"
#include "canopose/point_cloud.hpp"

namespace canopose {

enum class RotationMode { None, Z, SO3 };

std::string_view to_string(RotationMode mode);
RotationMode parse_rotation_mode(std::string_view name);

/// diag(a, b, c) applied on the right of the coordinates.
struct ScaleTransform {
  double a = 1.0;
  double b = 1.0;
  double c = 1.0;

  Mat3 matrix() const { return Mat3::diagonal(a, b, c); }
  /// diag(a^2, b^2, c^2) / (abc)^(1/3): the frame-side factor the scaled
  /// canonical pose is predicted to pick up.
  Mat3 predicted_pose_factor() const;
};

struct AugmentConfig {
  bool random_scaling = false;
  /// Upper bound M of the per-axis draw A[i] in (1, M).
  double scale_bound = 2.0;
  RotationMode rotation = RotationMode::None;
  /// Gaussian coordinate jitter; off by default and not part of the
  /// canonical-pose method.
  double jitter_sigma = 0.0;

  void validate() const;
};

/// C[i][i] = A[i] when B[i] == 0, else 1 / A[i].
ScaleTransform scale_from_draws(const std::array<double, 3>& magnitudes, const std::array<int, 3>& invert);

/// Draws A[i] uniform in (1, M) and B[i] in {0, 1}. Coordinates are scaled;
/// normals cannot follow a non-uniform scale and are dropped (normals_stale).
std::pair<PointCloud, ScaleTransform> random_scaling(const PointCloud& cloud, const AugmentConfig& cfg, Rng& rng);

struct ScaledFrameReport {
  ScaleTransform scale;
  /// Set distance between canonicalize(cloud * S) and the four signed copies
  /// of the centered cloud * S', S' the predicted pose factor.
  double deviation_from_prediction = 0.0;
  /// Same, against the centered cloud * S itself.
  double deviation_from_direct_scaling = 0.0;
  bool scaled_degenerate = false;
};

/// Diagnostic for the scaled-canonical-pose prediction. Expects a
/// non-degenerate cloud already in a canonical view; reports, never asserts.
ScaledFrameReport expected_scaled_frame_check(const PointCloud& cloud, const ScaleTransform& scale);

struct AugmentedCloud {
  PointCloud cloud;
  ScaleTransform scale;
  Mat3 rotation;
};

/// Random scaling (if enabled), then a z or SO(3) rotation, then jitter.
AugmentedCloud augment_cloud(const PointCloud& cloud, const AugmentConfig& cfg, Rng& rng);

/// Per cloud: random scaling (if enabled), then a z or SO(3) rotation, then
/// jitter. Each cloud gets its own stream split from one draw of `rng`.
std::vector<PointCloud> augment_batch(const std::vector<PointCloud>& clouds, const AugmentConfig& cfg, Rng& rng);

}  // namespace canopose
