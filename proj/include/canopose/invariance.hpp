#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "canopose/canonical.hpp"
#include "canopose/net.hpp"

namespace canopose {

/// Anisotropic Gaussian cloud under a random rotation and offset, redrawn
/// until its relative eigengap is at least `min_gap`.
PointCloud random_nondegenerate_cloud(std::size_t n, Rng& rng, double min_gap = 0.05);

struct InvarianceConfig {
  std::uint64_t seed = 0;
  int pose_trials = 1000;
  int closure_trials = 1000;
  int logit_trials = 100;
  int permutation_trials = 100;
  int fusion_weight_checks = 10000;
  int gradient_samples = 2;
  std::size_t points = 64;
  bool gradient_check = true;
  CanonicalizeOptions fault;
};

struct PropertyResult {
  std::string name;
  int trials = 0;
  int failures = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  /// Seed of the first failing trial, for replay.
  std::optional<std::uint64_t> failing_seed;
  double seconds = 0.0;

  bool passed() const { return failures == 0 && trials > 0; }
};

// Individual properties. Each trial t draws from Rng(derive_seed(seed, t)).
PropertyResult check_pose_set_invariance(const InvarianceConfig& cfg);
PropertyResult check_closure(const InvarianceConfig& cfg);
PropertyResult check_irreducibility(const InvarianceConfig& cfg);
PropertyResult check_logit_rotation_invariance(const InvarianceConfig& cfg);
PropertyResult check_branch_permutation(const InvarianceConfig& cfg);
PropertyResult check_fusion_weight_normalization(const InvarianceConfig& cfg);

/// Small network used for finite-difference checks: 10 points, 2 classes.
NetworkConfig gradient_check_config(FusionMode mode = FusionMode::FuseBeforePool);

struct GradientCheckOptions {
  double step = 1e-5;
  double relative_tolerance = 1e-5;
  /// Entries with |analytic| and |numeric| both below this are skipped.
  double magnitude_floor = 1e-8;
};

/// Central differences against reverse mode on every parameter.
PropertyResult check_gradients(const NetworkConfig& net, std::uint64_t seed, int samples,
                               const GradientCheckOptions& options = {});

std::vector<PropertyResult> run_invariance_battery(const InvarianceConfig& cfg);

}  // namespace canopose
