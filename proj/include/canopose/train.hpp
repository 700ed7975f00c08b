#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "canopose/augment.hpp"
#include "canopose/data.hpp"
#include "canopose/net.hpp"

namespace canopose {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// "cosine" anneals to zero over `epochs`; "constant" keeps the rate.
  std::string lr_schedule = "cosine";
  std::uint64_t seed = 0;
  AugmentConfig augment;
  int threads = 1;

  void validate(const NetworkConfig& net) const;
  double rate_for_epoch(int epoch) const;
};

/// Parameters and momentum are kept at f32 precision after every step, so a
/// checkpoint captures the state exactly and a resumed run matches an
/// unbroken one.
struct TrainState {
  Parameters params;
  Parameters velocity;
  int epochs_done = 0;

  static TrainState fresh(const NetworkConfig& net, std::uint64_t seed);
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&, const TrainState&)>;

/// Runs epochs [state.epochs_done, min(cfg.epochs, stop_after)) and returns
/// their statistics. Each epoch's shuffle and augmentation draws depend only
/// on (cfg.seed, epoch).
std::vector<EpochStats> train(TrainState& state, const std::vector<Sample>& samples, const NetworkConfig& net,
                              const TrainConfig& cfg, const EpochCallback& on_epoch = {}, int stop_after = -1);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::vector<int>> confusion;
  std::vector<int> predictions;
  std::vector<Eigen::VectorXd> logits;
};

EvalResult evaluate(const std::vector<Sample>& samples, const Parameters& params, const NetworkConfig& net,
                    int threads = 1);

}  // namespace canopose
