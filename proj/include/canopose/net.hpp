#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "canopose/canonical.hpp"
#include "canopose/linalg3.hpp"
#include "canopose/point_cloud.hpp"

namespace canopose {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Last-stage fusion scheme. FuseBeforePool is the point-wise softmax fusion
/// followed by global pooling; the others are the ablation baselines.
enum class FusionMode { MaxPool, AvgPool, PoolBeforeFuse, FuseBeforePool };

std::string_view to_string(FusionMode mode);
/// Throws BadFusionMode.
FusionMode parse_fusion_mode(std::string_view name);

struct StageConfig {
  int hidden = 32;
  int out = 64;
  int k = 8;
  /// Keep ceil(n / downsample) points by farthest point sampling; 1 keeps all.
  int downsample = 1;

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct NetworkConfig {
  /// 3 for xyz, 6 for xyz + normals.
  int in_channels = 3;
  std::vector<StageConfig> stages{{32, 64, 8, 1}, {64, 128, 8, 4}};
  std::vector<int> fusion_hidden{64};
  std::vector<int> head_hidden{512, 256};
  int num_classes = 6;
  FusionMode fusion = FusionMode::FuseBeforePool;

  void validate() const;
  /// Stage 0 reads the input channels; later stages read [f_ij | v_i].
  int stage_input_channels(std::size_t stage) const;
  int feature_width() const { return stages.back().out; }
  bool uses_fusion_mlp() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

NetworkConfig set_fusion_mode(NetworkConfig cfg, std::string_view mode);

/// y = x * weight + bias, x is (rows x in).
struct Dense {
  Matrix weight;
  RowVector bias;
};

/// One parameter set shared by all four branches.
struct Parameters {
  std::vector<std::array<Dense, 2>> stages;
  std::vector<Dense> fusion;
  std::vector<Dense> head;

  static Parameters zeros(const NetworkConfig& cfg);
  /// He-normal weights, zero biases; values rounded to f32 precision.
  static Parameters initialize(const NetworkConfig& cfg, Rng& rng);

  std::size_t count() const;
  void set_zero();
  Parameters& operator+=(const Parameters& other);
  Parameters& operator*=(double s);

  using Visitor = std::function<void(const std::string& name, std::span<double> values,
                                     const std::vector<std::size_t>& shape)>;
  using ConstVisitor = std::function<void(const std::string& name, std::span<const double> values,
                                          const std::vector<std::size_t>& shape)>;
  /// Arrays in declaration order: stages, fusion, head; weight before bias.
  void visit(const Visitor& fn);
  void visit(const ConstVisitor& fn) const;
};

using Gradients = Parameters;

/// Rounds every entry to the nearest f32 value (checkpoints store f32).
void round_to_f32(Parameters& params);

/// Per-point features for one branch at one stage.
struct FeatureMap {
  Matrix features;
  std::vector<Vec3> coords;
};

using BranchFeatures = std::array<Matrix, 4>;

/// k nearest neighbours of every point, self included, sorted by
/// (squared distance, index). Throws NeighborhoodTooLarge.
std::vector<std::vector<int>> knn(std::span<const Vec3> coords, int k);

/// Farthest point sampling of `count` points starting from the point
/// farthest from the centroid; ties go to the lowest index.
std::vector<int> farthest_point_sample(std::span<const Vec3> coords, std::size_t count);

/// Shared two-layer point MLP with ReLU, kNN local max pooling, then
/// farthest point downsampling.
FeatureMap stage_forward(const FeatureMap& input, const Parameters& params, const NetworkConfig& cfg,
                         std::size_t stage);

/// Channel-wise max over the four branches. Throws BranchShapeMismatch.
Matrix view_pool(const BranchFeatures& branches);

/// Per-point [f | v]. Throws BranchShapeMismatch.
Matrix concat_broadcast(const Matrix& pooled, const Matrix& branch);

struct FusionResult {
  Matrix fused;
  /// Softmax weights per branch, each (points x channels).
  BranchFeatures weights;
};

/// Scores each branch with the fusion MLP, softmax over branches per
/// (point, channel), and returns the weighted sum.
FusionResult pointwise_fuse(const BranchFeatures& branches, const Parameters& params);

Eigen::VectorXd forward_views(const std::array<PointCloud, 4>& views, const Parameters& params,
                              const NetworkConfig& cfg);
Eigen::VectorXd forward(const CanonicalViews& views, const Parameters& params, const NetworkConfig& cfg);
/// Canonicalizes, then runs the network.
Eigen::VectorXd forward(const PointCloud& cloud, const Parameters& params, const NetworkConfig& cfg);

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
  /// Logits per sample, as a by-product of the forward pass.
  std::vector<Eigen::VectorXd> logits;
};

/// Mean softmax cross-entropy over the batch and its gradient. PCA is fixed
/// preprocessing: no gradient flows into the canonical views.
LossAndGrad loss_and_grad(std::span<const CanonicalViews> batch, std::span<const int> labels,
                          const Parameters& params, const NetworkConfig& cfg, int threads = 1);

double cross_entropy(const Eigen::VectorXd& logits, int label);

/// velocity = momentum * velocity + grads; params -= lr * velocity.
/// Throws ShapeMismatch when the three sets disagree.
void sgd_step(Parameters& params, const Gradients& grads, Parameters& velocity, double lr, double momentum);

/// Parameter counts used to report the overhead of fusion.
struct ParameterBudget {
  std::size_t total = 0;
  std::size_t fusion_mlp = 0;
  /// Same stages and head without view pooling or a fusion MLP.
  std::size_t single_branch = 0;
};
ParameterBudget parameter_budget(const NetworkConfig& cfg);

}  // namespace canopose
