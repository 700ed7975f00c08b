#include "canopose/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <thread>

#include "canopose/canonical.hpp"
#include "canopose/error.hpp"

namespace canopose {

void TrainConfig::validate(const NetworkConfig& net) const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::InvalidConfig, why); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (lr_schedule != "cosine" && lr_schedule != "constant") fail("lr_schedule must be cosine or constant");
  if (threads < 1) fail("threads must be >= 1");
  augment.validate();
  if (augment.random_scaling && net.in_channels == 6) {
    fail("random scaling drops normals; use in_channels 3 with scaling");
  }
}

double TrainConfig::rate_for_epoch(int epoch) const {
  if (lr_schedule == "constant" || epochs <= 1) return learning_rate;
  return 0.5 * learning_rate * (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(epochs)));
}

TrainState TrainState::fresh(const NetworkConfig& net, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1417));
  TrainState s;
  s.params = Parameters::initialize(net, rng);
  s.velocity = Parameters::zeros(net);
  return s;
}

namespace {

bool augments(const AugmentConfig& a) {
  return a.random_scaling || a.rotation != RotationMode::None || a.jitter_sigma > 0.0;
}

std::vector<CanonicalViews> canonicalize_all(const std::vector<PointCloud>& clouds, int threads) {
  std::vector<CanonicalViews> out(clouds.size());
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(threads), 1, std::max<std::size_t>(clouds.size(), 1));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < clouds.size(); i += workers) out[i] = canonicalize(clouds[i]);
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  return out;
}

int argmax(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return static_cast<int>(best);
}

}  // namespace

std::vector<EpochStats> train(TrainState& state, const std::vector<Sample>& samples, const NetworkConfig& net,
                              const TrainConfig& cfg, const EpochCallback& on_epoch, int stop_after) {
  cfg.validate(net);
  if (samples.empty()) throw Error(ErrorCode::EmptyCloud, "empty training set");

  std::vector<PointCloud> clouds;
  std::vector<int> labels;
  for (const auto& s : samples) {
    clouds.push_back(s.cloud);
    labels.push_back(s.label);
  }
  std::vector<CanonicalViews> cached;
  if (!augments(cfg.augment)) cached = canonicalize_all(clouds, cfg.threads);

  const int last = stop_after < 0 ? cfg.epochs : std::min(cfg.epochs, stop_after);
  std::vector<EpochStats> history;
  for (int epoch = state.epochs_done; epoch < last; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(derive_seed(cfg.seed, 0x10000 + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    const double lr = cfg.rate_for_epoch(epoch);
    double loss_sum = 0.0;
    int correct = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<CanonicalViews> batch;
      std::vector<int> batch_labels;
      if (cached.empty()) {
        std::vector<PointCloud> raw;
        for (std::size_t i = b; i < end; ++i) raw.push_back(clouds[order[i]]);
        batch = canonicalize_all(augment_batch(raw, cfg.augment, rng), cfg.threads);
      }
      for (std::size_t i = b; i < end; ++i) {
        if (!cached.empty()) batch.push_back(cached[order[i]]);
        batch_labels.push_back(labels[order[i]]);
      }

      LossAndGrad lg = loss_and_grad(batch, batch_labels, state.params, net, cfg.threads);
      if (cfg.weight_decay > 0.0) {
        Parameters decay = state.params;
        decay *= cfg.weight_decay;
        lg.grads += decay;
      }
      sgd_step(state.params, lg.grads, state.velocity, lr, cfg.momentum);
      round_to_f32(state.params);
      round_to_f32(state.velocity);

      loss_sum += lg.loss * static_cast<double>(end - b);
      for (std::size_t i = 0; i < batch_labels.size(); ++i) {
        if (argmax(lg.logits[i]) == batch_labels[i]) ++correct;
      }
    }
    state.epochs_done = epoch + 1;

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = loss_sum / static_cast<double>(samples.size());
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    stats.learning_rate = lr;
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.push_back(stats);
    if (on_epoch) on_epoch(stats, state);
  }
  return history;
}

EvalResult evaluate(const std::vector<Sample>& samples, const Parameters& params, const NetworkConfig& net,
                    int threads) {
  if (samples.empty()) throw Error(ErrorCode::EmptyCloud, "empty evaluation set");
  EvalResult out;
  out.confusion.assign(static_cast<std::size_t>(net.num_classes), std::vector<int>(static_cast<std::size_t>(net.num_classes), 0));
  out.logits.resize(samples.size());
  out.predictions.resize(samples.size());

  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, samples.size());
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < samples.size(); i += workers) {
      out.logits[i] = forward(samples[i].cloud, params, net);
      out.predictions[i] = argmax(out.logits[i]);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }

  int correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int label = samples[i].label;
    if (label < 0 || label >= net.num_classes) throw Error(ErrorCode::BadLabel, "label out of range");
    ++out.confusion[static_cast<std::size_t>(label)][static_cast<std::size_t>(out.predictions[i])];
    if (out.predictions[i] == label) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return out;
}

}  // namespace canopose
