#include "canopose/net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "canopose/error.hpp"

namespace canopose {

std::string_view to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::MaxPool: return "max_pool";
    case FusionMode::AvgPool: return "avg_pool";
    case FusionMode::PoolBeforeFuse: return "pool_before_fuse";
    case FusionMode::FuseBeforePool: return "fuse_before_pool";
  }
  return "fuse_before_pool";
}

FusionMode parse_fusion_mode(std::string_view name) {
  if (name == "max_pool") return FusionMode::MaxPool;
  if (name == "avg_pool") return FusionMode::AvgPool;
  if (name == "pool_before_fuse") return FusionMode::PoolBeforeFuse;
  if (name == "fuse_before_pool") return FusionMode::FuseBeforePool;
  throw Error(ErrorCode::BadFusionMode, "unknown fusion mode '" + std::string(name) + "'");
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::InvalidConfig, why); };
  if (in_channels != 3 && in_channels != 6) fail("in_channels must be 3 or 6");
  if (stages.empty()) fail("at least one stage is required");
  for (const auto& s : stages) {
    if (s.hidden < 1 || s.out < 1) fail("stage widths must be positive");
    if (s.k < 1) fail("stage k must be positive");
    if (s.downsample < 1) fail("stage downsample must be >= 1");
  }
  for (int h : fusion_hidden) {
    if (h < 1) fail("fusion widths must be positive");
  }
  for (int h : head_hidden) {
    if (h < 1) fail("head widths must be positive");
  }
  if (num_classes < 1) fail("num_classes must be positive");
}

int NetworkConfig::stage_input_channels(std::size_t stage) const {
  return stage == 0 ? in_channels : 2 * stages[stage - 1].out;
}

bool NetworkConfig::uses_fusion_mlp() const {
  return fusion == FusionMode::FuseBeforePool || fusion == FusionMode::PoolBeforeFuse;
}

NetworkConfig set_fusion_mode(NetworkConfig cfg, std::string_view mode) {
  cfg.fusion = parse_fusion_mode(mode);
  return cfg;
}

namespace {

Dense make_dense(int in, int out) { return {Matrix::Zero(in, out), RowVector::Zero(out)}; }

std::vector<Dense> make_mlp(int in, const std::vector<int>& hidden, int out) {
  std::vector<Dense> layers;
  int width = in;
  for (int h : hidden) {
    layers.push_back(make_dense(width, h));
    width = h;
  }
  layers.push_back(make_dense(width, out));
  return layers;
}

std::size_t dense_count(const Dense& d) { return static_cast<std::size_t>(d.weight.size() + d.bias.size()); }

template <typename P, typename F>
void visit_impl(P& params, F&& fn) {
  auto visit_dense = [&](const std::string& prefix, auto& d) {
    fn(prefix + ".weight", d.weight.data(), d.weight.size(),
       std::vector<std::size_t>{static_cast<std::size_t>(d.weight.rows()), static_cast<std::size_t>(d.weight.cols())});
    fn(prefix + ".bias", d.bias.data(), d.bias.size(), std::vector<std::size_t>{static_cast<std::size_t>(d.bias.size())});
  };
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    for (std::size_t i = 0; i < 2; ++i) visit_dense("stage" + std::to_string(s) + ".fc" + std::to_string(i), params.stages[s][i]);
  }
  for (std::size_t i = 0; i < params.fusion.size(); ++i) visit_dense("fusion.fc" + std::to_string(i), params.fusion[i]);
  for (std::size_t i = 0; i < params.head.size(); ++i) visit_dense("head.fc" + std::to_string(i), params.head[i]);
}

}  // namespace

Parameters Parameters::zeros(const NetworkConfig& cfg) {
  cfg.validate();
  Parameters p;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const auto& st = cfg.stages[s];
    p.stages.push_back({make_dense(cfg.stage_input_channels(s), st.hidden), make_dense(st.hidden, st.out)});
  }
  const int width = cfg.feature_width();
  if (cfg.uses_fusion_mlp()) p.fusion = make_mlp(width, cfg.fusion_hidden, width);
  p.head = make_mlp(width, cfg.head_hidden, cfg.num_classes);
  return p;
}

Parameters Parameters::initialize(const NetworkConfig& cfg, Rng& rng) {
  Parameters p = zeros(cfg);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto fill = [&](Dense& d) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(d.weight.rows()));
    for (Eigen::Index i = 0; i < d.weight.size(); ++i) d.weight.data()[i] = stddev * gauss(rng);
  };
  for (auto& st : p.stages) {
    for (auto& d : st) fill(d);
  }
  for (auto& d : p.fusion) fill(d);
  for (auto& d : p.head) fill(d);
  round_to_f32(p);
  return p;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for (const auto& st : stages) n += dense_count(st[0]) + dense_count(st[1]);
  for (const auto& d : fusion) n += dense_count(d);
  for (const auto& d : head) n += dense_count(d);
  return n;
}

void Parameters::set_zero() {
  visit([](const std::string&, std::span<double> v, const std::vector<std::size_t>&) {
    std::fill(v.begin(), v.end(), 0.0);
  });
}

namespace {

void check_same_shape(const Parameters& a, const Parameters& b) {
  std::vector<std::vector<std::size_t>> shapes;
  a.visit([&](const std::string&, std::span<const double>, const std::vector<std::size_t>& shape) {
    shapes.push_back(shape);
  });
  std::size_t i = 0;
  bool ok = true;
  b.visit([&](const std::string&, std::span<const double>, const std::vector<std::size_t>& shape) {
    if (i >= shapes.size() || shapes[i] != shape) ok = false;
    ++i;
  });
  if (!ok || i != shapes.size()) throw Error(ErrorCode::ShapeMismatch, "parameter sets have different layouts");
}

void zip_arrays(Parameters& dst, const Parameters& src, const std::function<void(double&, double)>& op) {
  check_same_shape(dst, src);
  std::vector<std::span<const double>> arrays;
  src.visit([&](const std::string&, std::span<const double> v, const std::vector<std::size_t>&) { arrays.push_back(v); });
  std::size_t i = 0;
  dst.visit([&](const std::string&, std::span<double> v, const std::vector<std::size_t>&) {
    const auto& s = arrays[i++];
    for (std::size_t k = 0; k < v.size(); ++k) op(v[k], s[k]);
  });
}

}  // namespace

Parameters& Parameters::operator+=(const Parameters& other) {
  zip_arrays(*this, other, [](double& d, double s) { d += s; });
  return *this;
}

Parameters& Parameters::operator*=(double s) {
  visit([s](const std::string&, std::span<double> v, const std::vector<std::size_t>&) {
    for (double& x : v) x *= s;
  });
  return *this;
}

void Parameters::visit(const Visitor& fn) {
  visit_impl(*this, [&](const std::string& name, double* data, Eigen::Index size, const std::vector<std::size_t>& shape) {
    fn(name, std::span<double>(data, static_cast<std::size_t>(size)), shape);
  });
}

void Parameters::visit(const ConstVisitor& fn) const {
  visit_impl(*this, [&](const std::string& name, const double* data, Eigen::Index size,
                        const std::vector<std::size_t>& shape) {
    fn(name, std::span<const double>(data, static_cast<std::size_t>(size)), shape);
  });
}

void round_to_f32(Parameters& params) {
  params.visit([](const std::string&, std::span<double> v, const std::vector<std::size_t>&) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  });
}

std::vector<std::vector<int>> knn(std::span<const Vec3> coords, int k) {
  const std::size_t n = coords.size();
  if (k < 1 || static_cast<std::size_t>(k) > n) {
    throw Error(ErrorCode::NeighborhoodTooLarge,
                "k=" + std::to_string(k) + " with " + std::to_string(n) + " points");
  }
  std::vector<std::vector<int>> out(n);
  std::vector<std::pair<double, int>> dist(n);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      const Vec3 d = coords[q] - coords[p];
      dist[q] = {dot(d, d), static_cast<int>(q)};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    out[p].resize(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) out[p][static_cast<std::size_t>(i)] = dist[static_cast<std::size_t>(i)].second;
  }
  return out;
}

std::vector<int> farthest_point_sample(std::span<const Vec3> coords, std::size_t count) {
  const std::size_t n = coords.size();
  if (n == 0) throw Error(ErrorCode::EmptyCloud, "farthest point sampling of no points");
  count = std::clamp<std::size_t>(count, 1, n);
  const Vec3 c = centroid(coords);
  std::size_t start = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 d = coords[i] - c;
    if (dot(d, d) > best) {
      best = dot(d, d);
      start = i;
    }
  }
  std::vector<int> selected{static_cast<int>(start)};
  std::vector<char> taken(n, 0);
  taken[start] = 1;
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t last = start;
  while (selected.size() < count) {
    std::size_t next = n;
    double far = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 d = coords[i] - coords[last];
      min_dist[i] = std::min(min_dist[i], dot(d, d));
      if (!taken[i] && min_dist[i] > far) {
        far = min_dist[i];
        next = i;
      }
    }
    taken[next] = 1;
    selected.push_back(static_cast<int>(next));
    last = next;
  }
  return selected;
}

namespace {

struct MlpTape {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
};

Matrix mlp_forward(std::span<const Dense> layers, const Matrix& x, bool relu_last, MlpTape* tape) {
  Matrix h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Matrix a = h * layers[i].weight;
    a.rowwise() += layers[i].bias;
    if (tape) {
      tape->inputs.push_back(std::move(h));
      tape->pre.push_back(a);
    }
    if (i + 1 < layers.size() || relu_last) a = a.cwiseMax(0.0);
    h = std::move(a);
  }
  return h;
}

Matrix mlp_backward(std::span<const Dense> layers, const MlpTape& tape, Matrix dy, bool relu_last,
                    std::span<Dense> grads) {
  for (std::size_t i = layers.size(); i-- > 0;) {
    if (i + 1 < layers.size() || relu_last) {
      dy = dy.cwiseProduct((tape.pre[i].array() > 0.0).cast<double>().matrix());
    }
    grads[i].weight.noalias() += tape.inputs[i].transpose() * dy;
    grads[i].bias += dy.colwise().sum();
    Matrix dx = dy * layers[i].weight.transpose();
    dy = std::move(dx);
  }
  return dy;
}

struct StageTape {
  MlpTape mlp;
  std::vector<int> pool_arg;
  std::vector<int> selected;
  Eigen::Index rows = 0;
};

FeatureMap run_stage(const Matrix& input, const std::vector<Vec3>& coords, const Parameters& params,
                     const NetworkConfig& cfg, std::size_t s, StageTape* tape) {
  const StageConfig& st = cfg.stages[s];
  if (input.cols() != cfg.stage_input_channels(s) || static_cast<std::size_t>(input.rows()) != coords.size()) {
    throw Error(ErrorCode::ShapeMismatch, "stage " + std::to_string(s) + " input has the wrong shape");
  }
  const auto nbrs = knn(coords, st.k);
  const Matrix z = mlp_forward(params.stages[s], input, true, tape ? &tape->mlp : nullptr);
  const Eigen::Index n = z.rows();
  const Eigen::Index c = z.cols();

  Matrix pooled(n, c);
  std::vector<int> arg(static_cast<std::size_t>(n * c));
  for (Eigen::Index p = 0; p < n; ++p) {
    const auto& nb = nbrs[static_cast<std::size_t>(p)];
    int* row_arg = arg.data() + p * c;
    for (Eigen::Index ch = 0; ch < c; ++ch) {
      pooled(p, ch) = z(nb[0], ch);
      row_arg[ch] = nb[0];
    }
    for (std::size_t i = 1; i < nb.size(); ++i) {
      const int q = nb[i];
      for (Eigen::Index ch = 0; ch < c; ++ch) {
        const double v = z(q, ch);
        if (v > pooled(p, ch) || (v == pooled(p, ch) && q < row_arg[ch])) {
          pooled(p, ch) = v;
          row_arg[ch] = q;
        }
      }
    }
  }

  std::vector<int> selected;
  if (st.downsample == 1) {
    selected.resize(static_cast<std::size_t>(n));
    std::iota(selected.begin(), selected.end(), 0);
  } else {
    const std::size_t keep = (static_cast<std::size_t>(n) + static_cast<std::size_t>(st.downsample) - 1) /
                             static_cast<std::size_t>(st.downsample);
    selected = farthest_point_sample(coords, keep);
  }

  FeatureMap out;
  out.features.resize(static_cast<Eigen::Index>(selected.size()), c);
  out.coords.reserve(selected.size());
  for (std::size_t i = 0; i < selected.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = pooled.row(selected[i]);
    out.coords.push_back(coords[static_cast<std::size_t>(selected[i])]);
  }
  if (tape) {
    tape->pool_arg = std::move(arg);
    tape->selected = std::move(selected);
    tape->rows = n;
  }
  return out;
}

Matrix stage_backward(const StageTape& tape, const Matrix& d_out, const Parameters& params, std::size_t s,
                      Gradients& grads) {
  const Eigen::Index c = d_out.cols();
  Matrix d_pooled = Matrix::Zero(tape.rows, c);
  for (std::size_t i = 0; i < tape.selected.size(); ++i) {
    d_pooled.row(tape.selected[i]) += d_out.row(static_cast<Eigen::Index>(i));
  }
  Matrix dz = Matrix::Zero(tape.rows, c);
  for (Eigen::Index p = 0; p < tape.rows; ++p) {
    const int* row_arg = tape.pool_arg.data() + p * c;
    for (Eigen::Index ch = 0; ch < c; ++ch) dz(row_arg[ch], ch) += d_pooled(p, ch);
  }
  return mlp_backward(params.stages[s], tape.mlp, std::move(dz), true, grads.stages[s]);
}

void check_branch_shapes(const BranchFeatures& b) {
  for (std::size_t j = 1; j < 4; ++j) {
    if (b[j].rows() != b[0].rows() || b[j].cols() != b[0].cols()) {
      throw Error(ErrorCode::BranchShapeMismatch, "branches disagree in shape");
    }
  }
}

Matrix view_pool_arg(const BranchFeatures& branches, std::vector<int>* arg) {
  check_branch_shapes(branches);
  Matrix v = branches[0];
  if (arg) arg->assign(static_cast<std::size_t>(v.size()), 0);
  for (int j = 1; j < 4; ++j) {
    const Matrix& f = branches[static_cast<std::size_t>(j)];
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (f.data()[i] > v.data()[i]) {
        v.data()[i] = f.data()[i];
        if (arg) (*arg)[static_cast<std::size_t>(i)] = j;
      }
    }
  }
  return v;
}

// Column-wise max over rows; ties go to the lowest row.
RowVector global_max(const Matrix& m, std::vector<int>* arg) {
  RowVector g = m.row(0);
  if (arg) arg->assign(static_cast<std::size_t>(m.cols()), 0);
  for (Eigen::Index p = 1; p < m.rows(); ++p) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (m(p, c) > g(c)) {
        g(c) = m(p, c);
        if (arg) (*arg)[static_cast<std::size_t>(c)] = static_cast<int>(p);
      }
    }
  }
  return g;
}

BranchFeatures softmax_over_branches(const BranchFeatures& scores) {
  Matrix peak = scores[0];
  for (std::size_t j = 1; j < 4; ++j) peak = peak.cwiseMax(scores[j]);
  BranchFeatures w;
  Matrix total = Matrix::Zero(peak.rows(), peak.cols());
  for (std::size_t j = 0; j < 4; ++j) {
    w[j] = (scores[j] - peak).array().exp().matrix();
    total += w[j];
  }
  for (auto& wj : w) wj = wj.cwiseQuotient(total);
  return w;
}

struct NetTape {
  std::array<std::vector<StageTape>, 4> stages;
  std::vector<std::vector<int>> view_arg;
  BranchFeatures last;
  std::array<MlpTape, 4> fusion;
  BranchFeatures weights;
  std::vector<int> fuse_arg;
  std::vector<int> global_arg;
  std::array<std::vector<int>, 4> branch_global_arg;
  BranchFeatures branch_global;
  MlpTape head;
};

Matrix input_features(const PointCloud& view, int in_channels) {
  if (view.empty()) throw Error(ErrorCode::EmptyCloud, "network input has no points");
  if (in_channels == 6 && !view.has_normals()) {
    throw Error(ErrorCode::ShapeMismatch, "network expects normals but the cloud has none");
  }
  Matrix x(static_cast<Eigen::Index>(view.size()), in_channels);
  for (std::size_t i = 0; i < view.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int k = 0; k < 3; ++k) x(r, k) = view.points[i][static_cast<std::size_t>(k)];
    if (in_channels == 6) {
      for (int k = 0; k < 3; ++k) x(r, 3 + k) = view.normals[i][static_cast<std::size_t>(k)];
    }
  }
  return x;
}

RowVector run_network(const std::array<PointCloud, 4>& views, const Parameters& params, const NetworkConfig& cfg,
                      NetTape* tape) {
  for (std::size_t j = 1; j < 4; ++j) {
    if (views[j].size() != views[0].size()) throw Error(ErrorCode::BranchShapeMismatch, "views differ in size");
  }
  const std::size_t stages = cfg.stages.size();
  BranchFeatures inputs;
  std::array<std::vector<Vec3>, 4> coords;
  for (std::size_t j = 0; j < 4; ++j) {
    inputs[j] = input_features(views[j], cfg.in_channels);
    coords[j] = views[j].points;
    if (tape) tape->stages[j].resize(stages);
  }

  BranchFeatures outs;
  for (std::size_t s = 0; s < stages; ++s) {
    for (std::size_t j = 0; j < 4; ++j) {
      FeatureMap f = run_stage(inputs[j], coords[j], params, cfg, s, tape ? &tape->stages[j][s] : nullptr);
      outs[j] = std::move(f.features);
      coords[j] = std::move(f.coords);
    }
    if (s + 1 < stages) {
      std::vector<int> arg;
      const Matrix v = view_pool_arg(outs, tape ? &arg : nullptr);
      for (std::size_t j = 0; j < 4; ++j) inputs[j] = concat_broadcast(v, outs[j]);
      if (tape) tape->view_arg.push_back(std::move(arg));
    }
  }
  check_branch_shapes(outs);

  RowVector global;
  switch (cfg.fusion) {
    case FusionMode::FuseBeforePool: {
      BranchFeatures scores;
      for (std::size_t j = 0; j < 4; ++j) {
        scores[j] = mlp_forward(params.fusion, outs[j], false, tape ? &tape->fusion[j] : nullptr);
      }
      BranchFeatures w = softmax_over_branches(scores);
      Matrix fused = Matrix::Zero(outs[0].rows(), outs[0].cols());
      for (std::size_t j = 0; j < 4; ++j) fused += w[j].cwiseProduct(outs[j]);
      global = global_max(fused, tape ? &tape->global_arg : nullptr);
      if (tape) tape->weights = std::move(w);
      break;
    }
    case FusionMode::MaxPool: {
      const Matrix fused = view_pool_arg(outs, tape ? &tape->fuse_arg : nullptr);
      global = global_max(fused, tape ? &tape->global_arg : nullptr);
      break;
    }
    case FusionMode::AvgPool: {
      Matrix fused = Matrix::Zero(outs[0].rows(), outs[0].cols());
      for (const auto& o : outs) fused += o;
      fused *= 0.25;
      global = global_max(fused, tape ? &tape->global_arg : nullptr);
      break;
    }
    case FusionMode::PoolBeforeFuse: {
      BranchFeatures pooled;
      BranchFeatures scores;
      for (std::size_t j = 0; j < 4; ++j) {
        pooled[j] = global_max(outs[j], tape ? &tape->branch_global_arg[j] : nullptr);
        scores[j] = mlp_forward(params.fusion, pooled[j], false, tape ? &tape->fusion[j] : nullptr);
      }
      BranchFeatures w = softmax_over_branches(scores);
      global = RowVector::Zero(outs[0].cols());
      for (std::size_t j = 0; j < 4; ++j) global += w[j].cwiseProduct(pooled[j]);
      if (tape) {
        tape->weights = std::move(w);
        tape->branch_global = std::move(pooled);
      }
      break;
    }
  }

  const Matrix logits = mlp_forward(params.head, global, false, tape ? &tape->head : nullptr);
  if (tape) tape->last = std::move(outs);
  return logits.row(0);
}

void backward_network(const NetTape& tape, const RowVector& d_logits, const Parameters& params,
                      const NetworkConfig& cfg, Gradients& grads) {
  const Matrix dg_mat = mlp_backward(params.head, tape.head, Matrix(d_logits), false, grads.head);
  const RowVector dg = dg_mat.row(0);
  const Eigen::Index rows = tape.last[0].rows();
  const Eigen::Index cols = tape.last[0].cols();

  BranchFeatures d_last;
  for (auto& d : d_last) d = Matrix::Zero(rows, cols);

  auto softmax_backward = [&](const BranchFeatures& values, const auto& upstream, BranchFeatures& d_values,
                              BranchFeatures& d_scores) {
    BranchFeatures dw;
    Matrix weighted = Matrix::Zero(values[0].rows(), values[0].cols());
    for (std::size_t j = 0; j < 4; ++j) {
      d_values[j] = tape.weights[j].cwiseProduct(upstream);
      dw[j] = values[j].cwiseProduct(upstream);
      weighted += tape.weights[j].cwiseProduct(dw[j]);
    }
    for (std::size_t j = 0; j < 4; ++j) d_scores[j] = tape.weights[j].cwiseProduct(dw[j] - weighted);
  };

  if (cfg.fusion == FusionMode::PoolBeforeFuse) {
    BranchFeatures d_pooled;
    BranchFeatures d_scores;
    const Matrix upstream = dg;
    softmax_backward(tape.branch_global, upstream, d_pooled, d_scores);
    for (std::size_t j = 0; j < 4; ++j) {
      d_pooled[j] += mlp_backward(params.fusion, tape.fusion[j], d_scores[j], false, grads.fusion);
      for (Eigen::Index c = 0; c < cols; ++c) d_last[j](tape.branch_global_arg[j][static_cast<std::size_t>(c)], c) += d_pooled[j](0, c);
    }
  } else {
    Matrix d_fused = Matrix::Zero(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c) d_fused(tape.global_arg[static_cast<std::size_t>(c)], c) = dg(c);
    switch (cfg.fusion) {
      case FusionMode::FuseBeforePool: {
        BranchFeatures d_scores;
        softmax_backward(tape.last, d_fused, d_last, d_scores);
        for (std::size_t j = 0; j < 4; ++j) {
          d_last[j] += mlp_backward(params.fusion, tape.fusion[j], d_scores[j], false, grads.fusion);
        }
        break;
      }
      case FusionMode::MaxPool:
        for (Eigen::Index i = 0; i < d_fused.size(); ++i) {
          d_last[static_cast<std::size_t>(tape.fuse_arg[static_cast<std::size_t>(i)])].data()[i] += d_fused.data()[i];
        }
        break;
      case FusionMode::AvgPool:
        for (auto& d : d_last) d = 0.25 * d_fused;
        break;
      case FusionMode::PoolBeforeFuse:
        break;
    }
  }

  BranchFeatures d_out = std::move(d_last);
  for (std::size_t s = cfg.stages.size(); s-- > 0;) {
    BranchFeatures d_in;
    for (std::size_t j = 0; j < 4; ++j) d_in[j] = stage_backward(tape.stages[j][s], d_out[j], params, s, grads);
    if (s == 0) break;
    const Eigen::Index c = cfg.stages[s - 1].out;
    Matrix d_pool = Matrix::Zero(d_in[0].rows(), c);
    for (std::size_t j = 0; j < 4; ++j) {
      d_out[j] = d_in[j].leftCols(c);
      d_pool += d_in[j].rightCols(c);
    }
    const auto& arg = tape.view_arg[s - 1];
    for (Eigen::Index i = 0; i < d_pool.size(); ++i) {
      d_out[static_cast<std::size_t>(arg[static_cast<std::size_t>(i)])].data()[i] += d_pool.data()[i];
    }
  }
}

}  // namespace

FeatureMap stage_forward(const FeatureMap& input, const Parameters& params, const NetworkConfig& cfg,
                         std::size_t stage) {
  if (stage >= cfg.stages.size()) throw Error(ErrorCode::ShapeMismatch, "no such stage");
  return run_stage(input.features, input.coords, params, cfg, stage, nullptr);
}

Matrix view_pool(const BranchFeatures& branches) { return view_pool_arg(branches, nullptr); }

Matrix concat_broadcast(const Matrix& pooled, const Matrix& branch) {
  if (pooled.rows() != branch.rows() || pooled.cols() != branch.cols()) {
    throw Error(ErrorCode::BranchShapeMismatch, "pooled features do not match the branch");
  }
  Matrix out(branch.rows(), branch.cols() * 2);
  out.leftCols(branch.cols()) = branch;
  out.rightCols(branch.cols()) = pooled;
  return out;
}

FusionResult pointwise_fuse(const BranchFeatures& branches, const Parameters& params) {
  check_branch_shapes(branches);
  if (params.fusion.empty() || params.fusion.front().weight.rows() != branches[0].cols() ||
      params.fusion.back().weight.cols() != branches[0].cols()) {
    throw Error(ErrorCode::BranchShapeMismatch, "fusion MLP does not match the branch width");
  }
  BranchFeatures scores;
  for (std::size_t j = 0; j < 4; ++j) scores[j] = mlp_forward(params.fusion, branches[j], false, nullptr);
  FusionResult out;
  out.weights = softmax_over_branches(scores);
  out.fused = Matrix::Zero(branches[0].rows(), branches[0].cols());
  for (std::size_t j = 0; j < 4; ++j) out.fused += out.weights[j].cwiseProduct(branches[j]);
  return out;
}

Eigen::VectorXd forward_views(const std::array<PointCloud, 4>& views, const Parameters& params,
                              const NetworkConfig& cfg) {
  return run_network(views, params, cfg, nullptr).transpose();
}

Eigen::VectorXd forward(const CanonicalViews& views, const Parameters& params, const NetworkConfig& cfg) {
  return forward_views(views.views, params, cfg);
}

Eigen::VectorXd forward(const PointCloud& cloud, const Parameters& params, const NetworkConfig& cfg) {
  return forward(canonicalize(cloud), params, cfg);
}

double cross_entropy(const Eigen::VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) throw Error(ErrorCode::BadLabel, "label out of range");
  const double peak = logits.maxCoeff();
  const double lse = peak + std::log((logits.array() - peak).exp().sum());
  return lse - logits(label);
}

LossAndGrad loss_and_grad(std::span<const CanonicalViews> batch, std::span<const int> labels,
                          const Parameters& params, const NetworkConfig& cfg, int threads) {
  if (batch.empty()) throw Error(ErrorCode::EmptyCloud, "empty batch");
  if (labels.size() != batch.size()) throw Error(ErrorCode::ShapeMismatch, "one label per sample is required");
  for (int label : labels) {
    if (label < 0 || label >= cfg.num_classes) throw Error(ErrorCode::BadLabel, "label " + std::to_string(label));
  }
  const std::size_t n = batch.size();
  const double inv = 1.0 / static_cast<double>(n);
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, n);

  // One buffer per sample, summed in sample order, so the thread count
  // cannot change the floating-point result.
  std::vector<Gradients> partial(n, Gradients::zeros(cfg));
  std::vector<double> losses(n, 0.0);
  std::vector<Eigen::VectorXd> logits(n);

  auto work = [&](std::size_t w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    for (std::size_t i = begin; i < end; ++i) {
      NetTape tape;
      const RowVector out = run_network(batch[i].views, params, cfg, &tape);
      logits[i] = out.transpose();
      losses[i] = cross_entropy(logits[i], labels[i]);
      const double peak = out.maxCoeff();
      RowVector prob = (out.array() - peak).exp().matrix();
      prob /= prob.sum();
      prob(labels[i]) -= 1.0;
      backward_network(tape, prob * inv, params, cfg, partial[i]);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }

  LossAndGrad out{0.0, std::move(partial[0]), std::move(logits)};
  for (std::size_t i = 1; i < n; ++i) out.grads += partial[i];
  for (double l : losses) out.loss += l;
  out.loss *= inv;
  return out;
}

void sgd_step(Parameters& params, const Gradients& grads, Parameters& velocity, double lr, double momentum) {
  if (!(lr > 0.0)) throw Error(ErrorCode::InvalidConfig, "learning rate must be positive");
  check_same_shape(params, grads);
  check_same_shape(params, velocity);
  zip_arrays(velocity, grads, [momentum](double& v, double g) { v = momentum * v + g; });
  zip_arrays(params, velocity, [lr](double& p, double v) { p -= lr * v; });
}

ParameterBudget parameter_budget(const NetworkConfig& cfg) {
  ParameterBudget b;
  b.total = Parameters::zeros(cfg).count();
  NetworkConfig with_fusion = cfg;
  with_fusion.fusion = FusionMode::FuseBeforePool;
  for (const auto& d : Parameters::zeros(with_fusion).fusion) b.fusion_mlp += dense_count(d);

  std::size_t single = 0;
  int width = cfg.in_channels;
  for (const auto& st : cfg.stages) {
    single += static_cast<std::size_t>(width * st.hidden + st.hidden + st.hidden * st.out + st.out);
    width = st.out;
  }
  for (const auto& d : Parameters::zeros(with_fusion).head) single += dense_count(d);
  b.single_branch = single;
  return b;
}

}  // namespace canopose
