#include "canopose/invariance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace canopose {

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void record(PropertyResult& r, double deviation, bool ok, std::uint64_t seed) {
  ++r.trials;
  if (std::isnan(deviation)) deviation = std::numeric_limits<double>::infinity();
  r.max_deviation = std::max(r.max_deviation, deviation);
  if (!ok) {
    ++r.failures;
    if (!r.failing_seed) r.failing_seed = seed;
  }
}

std::array<PointCloud, 4> permuted(const std::array<PointCloud, 4>& views, const std::array<std::size_t, 4>& perm) {
  std::array<PointCloud, 4> out;
  for (std::size_t j = 0; j < 4; ++j) out[j] = views[perm[j]];
  return out;
}

PropertyResult make_result(std::string name, double tolerance) {
  PropertyResult r;
  r.name = std::move(name);
  r.tolerance = tolerance;
  return r;
}

}  // namespace

PointCloud random_nondegenerate_cloud(std::size_t n, Rng& rng, double min_gap) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> sigma(0.2, 1.5);
  std::uniform_real_distribution<double> offset(-5.0, 5.0);
  for (;;) {
    const Mat3 stretch = Mat3::diagonal(sigma(rng), sigma(rng), sigma(rng));
    const Mat3 rot = sample_rotation_so3(rng).matrix();
    const Vec3 shift{offset(rng), offset(rng), offset(rng)};
    PointCloud cloud;
    for (std::size_t i = 0; i < n; ++i) {
      cloud.points.push_back(Vec3{gauss(rng), gauss(rng), gauss(rng)} * stretch * rot + shift);
    }
    if (eigh3(covariance(cloud)).values.relative_eigengap() >= min_gap) return cloud;
  }
}

PropertyResult check_pose_set_invariance(const InvarianceConfig& cfg) {
  Stopwatch clock;
  PropertyResult r = make_result("pose_set_rotation_invariance", 1e-8);
  for (int t = 0; t < cfg.pose_trials; ++t) {
    const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(t));
    Rng rng(seed);
    const PointCloud cloud = random_nondegenerate_cloud(cfg.points, rng);
    const Mat3 rot = sample_rotation_so3(rng).matrix();
    const double d = view_set_distance(canonicalize(cloud, cfg.fault), canonicalize(apply_transform(cloud, rot), cfg.fault));
    record(r, d, d <= r.tolerance, seed);
  }
  r.seconds = clock.seconds();
  return r;
}

PropertyResult check_closure(const InvarianceConfig& cfg) {
  Stopwatch clock;
  PropertyResult r = make_result("operational_closure", 0.0);
  for (int t = 0; t < cfg.closure_trials; ++t) {
    const std::uint64_t seed = derive_seed(cfg.seed ^ 0xC105E, static_cast<std::uint64_t>(t));
    Rng rng(seed);
    const PoseSpace space = pose_space(sample_rotation_so3(rng), cfg.fault);
    double d = closure_defect(space);
    for (const auto& member : space.members) d = std::max(d, pose_set_distance(space, pose_space(member, cfg.fault)));
    record(r, d, d == 0.0, seed);
  }
  r.seconds = clock.seconds();
  return r;
}

PropertyResult check_irreducibility(const InvarianceConfig& cfg) {
  Stopwatch clock;
  PropertyResult r = make_result("irreducibility", 1e-6);
  for (int t = 0; t < cfg.pose_trials; ++t) {
    const std::uint64_t seed = derive_seed(cfg.seed ^ 0x1DEA, static_cast<std::uint64_t>(t));
    Rng rng(seed);
    const CanonicalViews views = canonicalize(random_nondegenerate_cloud(cfg.points, rng), cfg.fault);
    double closest = std::numeric_limits<double>::infinity();
    bool ok = !views.poses.degenerate;
    for (std::size_t i = 0; i < 4; ++i) {
      if (std::abs(determinant(views.poses.members[i].matrix()) - 1.0) > 1e-10) ok = false;
      for (std::size_t j = i + 1; j < 4; ++j) {
        closest = std::min(closest, max_abs_diff(views.poses.members[i].matrix(), views.poses.members[j].matrix()));
      }
    }
    ok = ok && distinct_member_count(views.poses, r.tolerance) == 4;
    // Deviation reported as the shortfall below the distinctness threshold.
    record(r, std::max(0.0, r.tolerance - closest), ok, seed);
  }
  r.seconds = clock.seconds();
  return r;
}

PropertyResult check_logit_rotation_invariance(const InvarianceConfig& cfg) {
  Stopwatch clock;
  PropertyResult r = make_result("logit_rotation_invariance", 1e-6);
  const NetworkConfig net;
  for (int t = 0; t < cfg.logit_trials; ++t) {
    const std::uint64_t seed = derive_seed(cfg.seed ^ 0x1091, static_cast<std::uint64_t>(t));
    Rng rng(seed);
    const Parameters params = Parameters::initialize(net, rng);
    const PointCloud cloud = random_nondegenerate_cloud(cfg.points, rng);
    const Mat3 rot = sample_rotation_so3(rng).matrix();
    const Eigen::VectorXd a = forward(canonicalize(cloud, cfg.fault), params, net);
    const Eigen::VectorXd b = forward(canonicalize(apply_transform(cloud, rot), cfg.fault), params, net);
    const double d = (a - b).cwiseAbs().maxCoeff();
    record(r, d, d <= r.tolerance, seed);
  }
  r.seconds = clock.seconds();
  return r;
}

PropertyResult check_branch_permutation(const InvarianceConfig& cfg) {
  Stopwatch clock;
  PropertyResult r = make_result("branch_permutation_invariance", 1e-12);
  constexpr std::array<FusionMode, 4> kModes{FusionMode::FuseBeforePool, FusionMode::MaxPool, FusionMode::AvgPool,
                                             FusionMode::PoolBeforeFuse};
  for (int t = 0; t < cfg.permutation_trials; ++t) {
    const std::uint64_t seed = derive_seed(cfg.seed ^ 0xBEEF, static_cast<std::uint64_t>(t));
    Rng rng(seed);
    NetworkConfig net;
    net.fusion = kModes[static_cast<std::size_t>(t) % kModes.size()];
    const Parameters params = Parameters::initialize(net, rng);
    const CanonicalViews views = canonicalize(random_nondegenerate_cloud(cfg.points, rng), cfg.fault);
    std::array<std::size_t, 4> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    const Eigen::VectorXd a = forward_views(views.views, params, net);
    const Eigen::VectorXd b = forward_views(permuted(views.views, perm), params, net);
    const double d = (a - b).cwiseAbs().maxCoeff();
    record(r, d, d <= r.tolerance, seed);
  }
  r.seconds = clock.seconds();
  return r;
}

PropertyResult check_fusion_weight_normalization(const InvarianceConfig& cfg) {
  Stopwatch clock;
  PropertyResult r = make_result("fusion_weight_normalization", 1e-6);
  NetworkConfig net;
  net.stages = {{16, 32, 4, 1}};
  net.fusion_hidden = {16};
  constexpr Eigen::Index kPoints = 8;
  std::uint64_t call = 0;
  while (r.trials < cfg.fusion_weight_checks) {
    const std::uint64_t seed = derive_seed(cfg.seed ^ 0xF05E, call++);
    Rng rng(seed);
    const Parameters params = Parameters::initialize(net, rng);
    std::normal_distribution<double> gauss(0.0, 3.0);
    BranchFeatures branches;
    for (auto& b : branches) {
      b.resize(kPoints, net.feature_width());
      for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = gauss(rng);
    }
    const FusionResult fused = pointwise_fuse(branches, params);
    for (Eigen::Index i = 0; i < fused.fused.size() && r.trials < cfg.fusion_weight_checks; ++i) {
      double sum = 0.0;
      bool nonnegative = true;
      for (const auto& w : fused.weights) {
        sum += w.data()[i];
        nonnegative = nonnegative && w.data()[i] >= 0.0;
      }
      const double d = std::abs(sum - 1.0);
      record(r, d, nonnegative && d <= r.tolerance, seed);
    }
  }
  r.seconds = clock.seconds();
  return r;
}

NetworkConfig gradient_check_config(FusionMode mode) {
  NetworkConfig net;
  net.in_channels = 3;
  net.stages = {{8, 12, 4, 1}, {12, 16, 4, 2}};
  net.fusion_hidden = {8};
  net.head_hidden = {16};
  net.num_classes = 2;
  net.fusion = mode;
  return net;
}

PropertyResult check_gradients(const NetworkConfig& net, std::uint64_t seed, int samples,
                               const GradientCheckOptions& options) {
  Stopwatch clock;
  PropertyResult r = make_result("gradient_finite_difference", options.relative_tolerance);
  Rng rng(derive_seed(seed, 0x6AD));
  Parameters params = Parameters::initialize(net, rng);
  // Non-zero biases so every parameter class is exercised away from zero.
  std::normal_distribution<double> small(0.0, 0.1);
  params.visit([&](const std::string& name, std::span<double> v, const std::vector<std::size_t>&) {
    if (name.ends_with(".bias")) {
      for (double& x : v) x = small(rng);
    }
  });

  std::vector<CanonicalViews> batch;
  std::vector<int> labels;
  for (int i = 0; i < samples; ++i) {
    batch.push_back(canonicalize(random_nondegenerate_cloud(10, rng)));
    labels.push_back(i % net.num_classes);
  }
  const Gradients analytic = loss_and_grad(batch, labels, params, net).grads;

  std::vector<std::span<const double>> analytic_arrays;
  analytic.visit([&](const std::string&, std::span<const double> v, const std::vector<std::size_t>&) {
    analytic_arrays.push_back(v);
  });
  std::size_t array_index = 0;
  Parameters probe = params;
  probe.visit([&](const std::string&, std::span<double> v, const std::vector<std::size_t>&) {
    const auto& g = analytic_arrays[array_index++];
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double saved = v[k];
      v[k] = saved + options.step;
      const double up = loss_and_grad(batch, labels, probe, net).loss;
      v[k] = saved - options.step;
      const double down = loss_and_grad(batch, labels, probe, net).loss;
      v[k] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double scale = std::max(std::abs(g[k]), std::abs(numeric));
      if (scale <= options.magnitude_floor) continue;
      const double rel = std::abs(g[k] - numeric) / scale;
      record(r, rel, rel <= options.relative_tolerance, seed);
    }
  });
  r.seconds = clock.seconds();
  return r;
}

std::vector<PropertyResult> run_invariance_battery(const InvarianceConfig& cfg) {
  std::vector<PropertyResult> out;
  out.push_back(check_pose_set_invariance(cfg));
  out.push_back(check_closure(cfg));
  out.push_back(check_irreducibility(cfg));
  out.push_back(check_logit_rotation_invariance(cfg));
  out.push_back(check_branch_permutation(cfg));
  out.push_back(check_fusion_weight_normalization(cfg));
  if (cfg.gradient_check) out.push_back(check_gradients(gradient_check_config(), cfg.seed, cfg.gradient_samples));
  return out;
}

}  // namespace canopose
