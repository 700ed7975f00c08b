#include "canopose/augment.hpp"

#include <cmath>
#include <tuple>

#include "canopose/canonical.hpp"
#include "canopose/error.hpp"

namespace canopose {

std::string_view to_string(RotationMode mode) {
  switch (mode) {
    case RotationMode::None: return "none";
    case RotationMode::Z: return "z";
    case RotationMode::SO3: return "so3";
  }
  return "none";
}

RotationMode parse_rotation_mode(std::string_view name) {
  if (name == "none") return RotationMode::None;
  if (name == "z") return RotationMode::Z;
  if (name == "so3" || name == "SO3") return RotationMode::SO3;
  throw Error(ErrorCode::InvalidConfig, "unknown rotation mode '" + std::string(name) + "'");
}

Mat3 ScaleTransform::predicted_pose_factor() const {
  const double g = std::cbrt(a * b * c);
  return Mat3::diagonal(a * a / g, b * b / g, c * c / g);
}

void AugmentConfig::validate() const {
  if (!(scale_bound > 1.0) || !std::isfinite(scale_bound)) {
    throw Error(ErrorCode::InvalidBound, "scale_bound must be a finite value > 1");
  }
  if (!(jitter_sigma >= 0.0) || !std::isfinite(jitter_sigma)) {
    throw Error(ErrorCode::InvalidConfig, "jitter_sigma must be finite and >= 0");
  }
}

ScaleTransform scale_from_draws(const std::array<double, 3>& magnitudes, const std::array<int, 3>& invert) {
  std::array<double, 3> d{};
  for (std::size_t i = 0; i < 3; ++i) d[i] = invert[i] == 0 ? magnitudes[i] : 1.0 / magnitudes[i];
  return {d[0], d[1], d[2]};
}

std::pair<PointCloud, ScaleTransform> random_scaling(const PointCloud& cloud, const AugmentConfig& cfg, Rng& rng) {
  if (!(cfg.scale_bound > 1.0) || !std::isfinite(cfg.scale_bound)) {
    throw Error(ErrorCode::InvalidBound, "scale_bound must be a finite value > 1");
  }
  std::uniform_real_distribution<double> magnitude(1.0, cfg.scale_bound);
  std::uniform_int_distribution<int> coin(0, 1);
  std::array<double, 3> a{};
  std::array<int, 3> b{};
  for (std::size_t i = 0; i < 3; ++i) {
    do {
      a[i] = magnitude(rng);
    } while (a[i] <= 1.0);
    b[i] = coin(rng);
  }
  const ScaleTransform s = scale_from_draws(a, b);

  PointCloud out = cloud;
  const Mat3 m = s.matrix();
  for (auto& p : out.points) p = p * m;
  if (out.has_normals()) {
    out.normals.clear();
    out.normals_stale = true;
  }
  return {std::move(out), s};
}

ScaledFrameReport expected_scaled_frame_check(const PointCloud& cloud, const ScaleTransform& scale) {
  if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "diagnostic needs points");
  if (principal_frame(cloud).degenerate) throw Error(ErrorCode::DegenerateInput, "cloud spectrum is degenerate");

  PointCloud coords = cloud;
  coords.normals.clear();

  auto signed_copies = [&](const Mat3& m) {
    PointCloud scaled = apply_transform(coords, m);
    const Vec3 c = centroid(scaled);
    for (auto& p : scaled.points) p = p - c;
    CanonicalViews views;
    const auto& signs = SignMatrixSet::matrices();
    for (std::size_t i = 0; i < 4; ++i) views.views[i] = apply_transform(scaled, signs[i]);
    return views;
  };

  ScaledFrameReport report;
  report.scale = scale;
  const CanonicalViews actual = canonicalize(apply_transform(coords, scale.matrix()));
  report.scaled_degenerate = actual.poses.degenerate;
  report.deviation_from_prediction = view_set_distance(actual, signed_copies(scale.predicted_pose_factor()));
  report.deviation_from_direct_scaling = view_set_distance(actual, signed_copies(scale.matrix()));
  return report;
}

AugmentedCloud augment_cloud(const PointCloud& cloud, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  AugmentedCloud out{cloud, {}, Mat3::identity()};
  if (cfg.random_scaling) std::tie(out.cloud, out.scale) = random_scaling(cloud, cfg, rng);
  if (cfg.rotation == RotationMode::Z) {
    out.rotation = sample_rotation_z(rng).matrix();
  } else if (cfg.rotation == RotationMode::SO3) {
    out.rotation = sample_rotation_so3(rng).matrix();
  }
  if (cfg.rotation != RotationMode::None) out.cloud = apply_transform(out.cloud, out.rotation);
  if (cfg.jitter_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.jitter_sigma);
    for (auto& p : out.cloud.points) p = p + Vec3{noise(rng), noise(rng), noise(rng)};
  }
  return out;
}

std::vector<PointCloud> augment_batch(const std::vector<PointCloud>& clouds, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::uint64_t base = rng();
  std::vector<PointCloud> out;
  out.reserve(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    Rng local(derive_seed(base, i));
    out.push_back(augment_cloud(clouds[i], cfg, local).cloud);
  }
  return out;
}

}  // namespace canopose
