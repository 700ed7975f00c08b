#include "canopose/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "canopose/augment.hpp"
#include "canopose/canonical.hpp"
#include "canopose/checkpoint.hpp"
#include "canopose/data.hpp"
#include "canopose/error.hpp"
#include "canopose/invariance.hpp"
#include "canopose/net.hpp"
#include "canopose/train.hpp"

#ifndef CANOPOSE_VERSION
#define CANOPOSE_VERSION "0.0.0"
#endif
#ifndef CANOPOSE_GIT
#define CANOPOSE_GIT "unknown"
#endif

namespace canopose {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point since) { return std::chrono::duration<double>(Clock::now() - since).count(); }

struct Io {
  std::ostream& out;
  std::ostream& err;
};

// A flag that, when given, replaces config[key].
struct Override {
  CLI::Option* option = nullptr;
  std::string key;
  std::function<Json()> value;
};

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  Json defaults;
  std::string config_path;
  std::vector<Override> overrides;
  std::function<int(const Json&, Io&)> run;
};

template <class T>
void add_flag(Command& cmd, const std::string& flag, const std::string& key, const std::string& help) {
  auto value = std::make_shared<T>();
  CLI::Option* opt = cmd.app->add_option(flag, *value, help);
  cmd.overrides.push_back({opt, key, [value] { return Json(*value); }});
}

void add_switch(Command& cmd, const std::string& flag, const std::string& key, const std::string& help) {
  CLI::Option* opt = cmd.app->add_flag(flag, help);
  cmd.overrides.push_back({opt, key, [] { return Json(true); }});
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config " + path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
  }
}

AugmentConfig parse_augment(const Json& j);

// Defaults, then the config file, then flags. Keys absent from the defaults
// are rejected.
Json resolve_config(const Command& cmd) {
  Json cfg = cmd.defaults;
  if (!cmd.config_path.empty()) {
    const Json file = read_json_file(cmd.config_path);
    if (!file.is_object()) throw Error(ErrorCode::InvalidConfig, "config must be a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (!cfg.contains(key)) throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "' for " + cmd.name);
      cfg[key] = value;
    }
  }
  for (const auto& o : cmd.overrides) {
    if (o.option->count() > 0) {
      // "a.b" addresses a nested key.
      const auto dot = o.key.find('.');
      if (dot == std::string::npos) {
        cfg[o.key] = o.value();
      } else {
        cfg[o.key.substr(0, dot)][o.key.substr(dot + 1)] = o.value();
      }
    }
  }
  // Nested blocks are echoed with their defaults filled in.
  if (cfg.contains("network") && !cfg["network"].is_null()) {
    cfg["network"] = to_json(network_config_from_json(cfg["network"]));
  }
  if (cfg.contains("augment")) {
    const AugmentConfig a = parse_augment(cfg["augment"]);
    cfg["augment"] = {{"random_scaling", a.random_scaling},
                      {"scale_bound", a.scale_bound},
                      {"rotation", std::string(to_string(a.rotation))},
                      {"jitter_sigma", a.jitter_sigma}};
  }
  if (cfg["threads"].is_null()) {
    int threads = 1;
    if (const char* env = std::getenv("CANOPOSE_THREADS")) {
      try {
        threads = std::stoi(env);
      } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidConfig, "CANOPOSE_THREADS is not an integer");
      }
    }
    cfg["threads"] = threads;
  }
  if (cfg["threads"].get<int>() < 1) throw Error(ErrorCode::InvalidConfig, "threads must be >= 1");
  return cfg;
}

template <class T>
T get(const Json& cfg, const std::string& key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, "key '" + key + "': " + e.what());
  }
}

std::string require_path(const Json& cfg, const std::string& key) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) throw Error(ErrorCode::InvalidConfig, "missing required '" + key + "'");
  return get<std::string>(cfg, key);
}

Json augment_defaults() {
  const AugmentConfig a;
  return {{"random_scaling", a.random_scaling},
          {"scale_bound", a.scale_bound},
          {"rotation", std::string(to_string(a.rotation))},
          {"jitter_sigma", a.jitter_sigma}};
}

AugmentConfig parse_augment(const Json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "augment must be an object");
  const Json defaults = augment_defaults();
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw Error(ErrorCode::InvalidConfig, "unknown augment key '" + key + "'");
  }
  AugmentConfig a;
  try {
    a.random_scaling = j.value("random_scaling", a.random_scaling);
    a.scale_bound = j.value("scale_bound", a.scale_bound);
    a.rotation = parse_rotation_mode(j.value("rotation", std::string(to_string(a.rotation))));
    a.jitter_sigma = j.value("jitter_sigma", a.jitter_sigma);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("augment: ") + e.what());
  }
  a.validate();
  return a;
}

Json shared_defaults() { return {{"seed", 0}, {"threads", nullptr}, {"out", nullptr}}; }

Json stamp() { return {{"version", CANOPOSE_VERSION}, {"git", CANOPOSE_GIT}}; }

Json to_json(const Mat3& m) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return rows;
}

Json to_json(const Spectrum& s) { return {s.lambda1, s.lambda2, s.lambda3}; }

std::optional<fs::path> out_dir(const Json& cfg) {
  if (cfg.at("out").is_null()) return std::nullopt;
  fs::path dir = get<std::string>(cfg, "out");
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  f << j.dump(2) << '\n';
}

void emit(Io& io, const Json& metrics, const std::optional<fs::path>& dir, const std::string& file = "metrics.json") {
  io.out << metrics.dump(2) << '\n';
  if (dir) write_json(*dir / file, metrics);
}

PointCloud load_cloud(const std::string& path, std::size_t samples, std::uint64_t seed) {
  if (fs::path(path).extension() == ".off") {
    Rng rng(derive_seed(seed, 0x0FF));
    return load_off(path, samples, rng);
  }
  return load_xyz(path);
}

Json epoch_json(const EpochStats& e) {
  return {{"epoch", e.epoch},
          {"loss", e.loss},
          {"train_accuracy", e.train_accuracy},
          {"learning_rate", e.learning_rate},
          {"seconds", e.seconds}};
}

Json budget_json(const NetworkConfig& net) {
  const ParameterBudget b = parameter_budget(net);
  return {{"total", b.total},
          {"fusion_mlp", b.fusion_mlp},
          {"single_branch", b.single_branch},
          {"fusion_overhead", static_cast<double>(b.fusion_mlp) / static_cast<double>(b.single_branch)}};
}

// ---- canonicalize ----

int cmd_canonicalize(const Json& cfg, Io& io) {
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const PointCloud cloud = load_cloud(require_path(cfg, "input"), get<std::size_t>(cfg, "samples"), seed);
  const CanonicalViews views = canonicalize(cloud);
  const auto dir = out_dir(cfg);
  Json files = Json::array();
  if (dir) {
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string name = "view_" + std::to_string(i) + ".xyz";
      save_xyz(views.views[i], *dir / name);
      files.push_back(name);
    }
  }
  Json frames = Json::array();
  for (const auto& f : views.poses.members) frames.push_back(to_json(f.matrix()));
  const Json report{{"spectrum", to_json(views.poses.spectrum)},
                    {"relative_eigengap", views.poses.spectrum.relative_eigengap()},
                    {"frames", frames},
                    {"center", {views.center.x, views.center.y, views.center.z}},
                    {"degenerate", views.poses.degenerate},
                    {"points", cloud.size()},
                    {"files", files}};
  emit(io, report, dir, "report.json");
  if (views.poses.degenerate) {
    io.err << "warning: degenerate spectrum, the canonical frame is not unique\n";
    return kExitDegenerate;
  }
  return kExitOk;
}

// ---- gen-dataset ----

std::vector<int> per_class_counts(const Json& value, int total, std::size_t classes, const char* key) {
  if (value.is_null()) return balanced_counts(total, static_cast<int>(classes));
  if (value.is_number_integer()) return std::vector<int>(classes, value.get<int>());
  auto counts = value.get<std::vector<int>>();
  if (counts.size() != classes) {
    throw Error(ErrorCode::InvalidConfig, std::string(key) + " must list one count per class");
  }
  return counts;
}

int cmd_gen_dataset(const Json& cfg, Io& io) {
  SplitSpec spec;
  spec.classes = get<std::vector<int>>(cfg, "classes");
  spec.points = get<std::size_t>(cfg, "points");
  spec.protocol = parse_protocol(get<std::string>(cfg, "protocol"));
  spec.seed = get<std::uint64_t>(cfg, "seed");
  spec.train_per_class = per_class_counts(cfg.at("train_per_class"), get<int>(cfg, "train_size"), spec.classes.size(),
                                          "train_per_class");
  spec.test_per_class = per_class_counts(cfg.at("test_per_class"), get<int>(cfg, "test_size"), spec.classes.size(),
                                         "test_per_class");
  for (int c : spec.train_per_class) {
    if (c < 1) throw Error(ErrorCode::InvalidConfig, "train counts must be >= 1");
  }
  for (int c : spec.test_per_class) {
    if (c < 0) throw Error(ErrorCode::InvalidConfig, "test counts must be >= 0");
  }
  const auto dir = out_dir(cfg);
  if (!dir) throw Error(ErrorCode::InvalidConfig, "gen-dataset needs --out");
  const DatasetSplit split = make_split(spec);
  write_dataset(split, *dir);
  Json summary{{"out", dir->string()},
               {"protocol", std::string(to_string(split.protocol))},
               {"train", split.train.size()},
               {"test", split.test.size()},
               {"train_per_class", spec.train_per_class},
               {"test_per_class", spec.test_per_class},
               {"seed", spec.seed}};
  io.out << summary.dump(2) << '\n';
  return kExitOk;
}

// ---- augment ----

int cmd_augment(const Json& cfg, Io& io) {
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const PointCloud cloud = load_cloud(require_path(cfg, "input"), get<std::size_t>(cfg, "samples"), seed);
  const AugmentConfig aug = parse_augment(cfg.at("augment"));
  const int copies = get<int>(cfg, "copies");
  if (copies < 1) throw Error(ErrorCode::InvalidConfig, "copies must be >= 1");
  const auto dir = out_dir(cfg);
  Json outputs = Json::array();
  for (int i = 0; i < copies; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const AugmentedCloud result = augment_cloud(cloud, aug, rng);
    Json entry{{"scale", {result.scale.a, result.scale.b, result.scale.c}},
               {"rotation", to_json(result.rotation)},
               {"normals_stale", result.cloud.normals_stale}};
    if (dir) {
      char name[32];
      std::snprintf(name, sizeof name, "aug_%04d.xyz", i);
      save_xyz(result.cloud, *dir / name);
      entry["file"] = name;
    }
    outputs.push_back(entry);
  }
  emit(io, Json{{"copies", outputs}}, dir, "augment.json");
  return kExitOk;
}

// ---- train ----

Json train_meta(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"lr_schedule", t.lr_schedule},
          {"seed", t.seed}};
}

int cmd_train(const Json& cfg, Io& io) {
  const auto start = Clock::now();
  const NetworkConfig net = network_config_from_json(cfg.at("network"));
  TrainConfig t;
  t.epochs = get<int>(cfg, "epochs");
  t.batch_size = get<int>(cfg, "batch_size");
  t.learning_rate = get<double>(cfg, "learning_rate");
  t.momentum = get<double>(cfg, "momentum");
  t.weight_decay = get<double>(cfg, "weight_decay");
  t.lr_schedule = get<std::string>(cfg, "lr_schedule");
  t.seed = get<std::uint64_t>(cfg, "seed");
  t.threads = get<int>(cfg, "threads");
  t.augment = parse_augment(cfg.at("augment"));
  t.validate(net);
  const int stop_after = cfg.at("stop_after").is_null() ? -1 : get<int>(cfg, "stop_after");
  const auto dir = out_dir(cfg);
  if (!dir) throw Error(ErrorCode::InvalidConfig, "train needs --out");

  const DatasetSplit data = read_dataset(require_path(cfg, "dataset"));
  if (data.train.empty()) throw Error(ErrorCode::InvalidConfig, "training set is empty");

  TrainState state = TrainState::fresh(net, t.seed);
  if (!cfg.at("resume").is_null()) {
    Checkpoint ckpt = load_checkpoint(get<std::string>(cfg, "resume"));
    if (!(ckpt.network == net)) throw Error(ErrorCode::CheckpointMismatch, "resume checkpoint has a different network");
    if (!ckpt.velocity) throw Error(ErrorCode::CheckpointMismatch, "resume checkpoint has no momentum buffers");
    if (ckpt.meta.value("train", Json::object()) != train_meta(t)) {
      throw Error(ErrorCode::CheckpointMismatch, "resume checkpoint was trained with a different schedule");
    }
    state.params = std::move(ckpt.params);
    state.velocity = std::move(*ckpt.velocity);
    state.epochs_done = ckpt.meta.value("epochs_done", 0);
    io.err << "resuming after epoch " << state.epochs_done << '\n';
  }

  Json epochs = Json::array();
  train(state, data.train, net, t, [&](const EpochStats& e, const TrainState&) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %d  loss %.6f  train_acc %.4f  lr %.5f  %.1fs\n", e.epoch, e.loss,
                  e.train_accuracy, e.learning_rate, e.seconds);
    io.err << line << std::flush;
    epochs.push_back(epoch_json(e));
  }, stop_after);

  Checkpoint ckpt{net, {{"epochs_done", state.epochs_done}, {"train", train_meta(t)}}, state.params, state.velocity};
  save_checkpoint(ckpt, *dir / "checkpoint.bin");

  Json metrics{{"command", "train"},
               {"config", cfg},
               {"epochs", epochs},
               {"epochs_done", state.epochs_done},
               {"fusion", std::string(to_string(net.fusion))},
               {"protocol", std::string(to_string(data.protocol))},
               {"parameters", budget_json(net)},
               {"checkpoint", (*dir / "checkpoint.bin").string()},
               {"stamp", stamp()}};
  if (get<bool>(cfg, "eval_test") && !data.test.empty()) {
    const EvalResult r = evaluate(data.test, state.params, net, t.threads);
    metrics["test_accuracy"] = {{std::string(to_string(data.protocol)), r.accuracy}};
    metrics["confusion"] = r.confusion;
  }
  metrics["wall_clock_seconds"] = elapsed(start);
  emit(io, metrics, dir);
  return kExitOk;
}

// ---- eval ----

int cmd_eval(const Json& cfg, Io& io) {
  const auto start = Clock::now();
  const Checkpoint ckpt = load_checkpoint(require_path(cfg, "checkpoint"));
  if (!cfg.at("network").is_null() && !(network_config_from_json(cfg.at("network")) == ckpt.network)) {
    throw Error(ErrorCode::CheckpointMismatch, "network config differs from the checkpoint");
  }
  const DatasetSplit data = read_dataset(require_path(cfg, "dataset"));
  const auto split_name = get<std::string>(cfg, "split");
  if (split_name != "train" && split_name != "test") throw Error(ErrorCode::InvalidConfig, "split must be train or test");
  std::vector<Sample> samples = split_name == "train" ? data.train : data.test;
  if (samples.empty()) throw Error(ErrorCode::InvalidConfig, "the " + split_name + " set is empty");
  for (const auto& s : samples) {
    if (s.label < 0 || s.label >= ckpt.network.num_classes) {
      throw Error(ErrorCode::CheckpointMismatch, "dataset label " + std::to_string(s.label) + " outside the " +
                                                     std::to_string(ckpt.network.num_classes) + " checkpoint classes");
    }
    if (s.cloud.normals.empty() && ckpt.network.in_channels == 6) {
      throw Error(ErrorCode::CheckpointMismatch, "checkpoint expects normals");
    }
  }

  const AugmentConfig aug = parse_augment(cfg.at("augment"));
  const auto seed = get<std::uint64_t>(cfg, "seed");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng(derive_seed(derive_seed(seed, 0xE7A1), i));
    samples[i].cloud = augment_cloud(samples[i].cloud, aug, rng).cloud;
  }

  const EvalResult r = evaluate(samples, ckpt.params, ckpt.network, get<int>(cfg, "threads"));
  Json metrics{{"command", "eval"},
               {"config", cfg},
               {"accuracy", r.accuracy},
               {"confusion", r.confusion},
               {"predictions", r.predictions},
               {"samples", samples.size()},
               {"protocol", std::string(to_string(data.protocol))},
               {"fusion", std::string(to_string(ckpt.network.fusion))},
               {"stamp", stamp()}};
  if (get<bool>(cfg, "include_logits")) {
    Json logits = Json::array();
    for (const auto& l : r.logits) logits.push_back(std::vector<double>(l.data(), l.data() + l.size()));
    metrics["logits"] = logits;
  }
  metrics["wall_clock_seconds"] = elapsed(start);
  emit(io, metrics, out_dir(cfg));
  return kExitOk;
}

// ---- check-invariance ----

Json property_json(const PropertyResult& r) {
  Json j{{"name", r.name},           {"trials", r.trials},       {"failures", r.failures},
         {"max_deviation", r.max_deviation}, {"tolerance", r.tolerance}, {"passed", r.passed()},
         {"seconds", r.seconds}};
  j["failing_seed"] = r.failing_seed ? Json(*r.failing_seed) : Json(nullptr);
  return j;
}

int cmd_check_invariance(const Json& cfg, Io& io) {
  const auto start = Clock::now();
  InvarianceConfig ic;
  ic.seed = get<std::uint64_t>(cfg, "seed");
  ic.pose_trials = get<int>(cfg, "trials");
  ic.closure_trials = get<int>(cfg, "trials");
  ic.logit_trials = get<int>(cfg, "logit_trials");
  ic.permutation_trials = get<int>(cfg, "permutation_trials");
  ic.fusion_weight_checks = get<int>(cfg, "fusion_weight_checks");
  ic.points = get<std::size_t>(cfg, "points");
  ic.gradient_check = get<bool>(cfg, "gradient_check");
  ic.gradient_samples = get<int>(cfg, "gradient_samples");
  ic.fault.inject_sign_flip_fault = get<bool>(cfg, "inject_fault");
  if (ic.pose_trials < 1 || ic.logit_trials < 1 || ic.permutation_trials < 1 || ic.fusion_weight_checks < 1 ||
      ic.gradient_samples < 1) {
    throw Error(ErrorCode::InvalidConfig, "trial counts must be >= 1");
  }
  if (ic.points < 4) throw Error(ErrorCode::InvalidConfig, "points must be >= 4");
  if (ic.fault.inject_sign_flip_fault) io.err << "warning: sign-flip fault injected into pose_space\n";

  const auto results = run_invariance_battery(ic);
  Json properties = Json::array();
  bool all_passed = true;
  double max_logit = 0.0;
  for (const auto& r : results) {
    properties.push_back(property_json(r));
    if (r.name == "logit_rotation_invariance") max_logit = r.max_deviation;
    if (!r.passed()) {
      all_passed = false;
      io.err << "FAILED " << r.name << ": " << r.failures << "/" << r.trials << " trials, max deviation "
             << r.max_deviation << "; replay with --seed " << ic.seed;
      if (r.failing_seed) io.err << " (trial seed " << *r.failing_seed << ")";
      io.err << '\n';
    }
  }
  const Json metrics{{"command", "check-invariance"},
                     {"config", cfg},
                     {"properties", properties},
                     {"passed", all_passed},
                     {"max_logit_deviation", max_logit},
                     {"wall_clock_seconds", elapsed(start)},
                     {"stamp", stamp()}};
  emit(io, metrics, out_dir(cfg));
  return all_passed ? kExitOk : kExitPropertyFailure;
}

// ---- bench ----

template <class F>
double seconds_per_call(int reps, F&& fn) {
  const auto start = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  return elapsed(start) / reps;
}

int cmd_bench(const Json& cfg, Io& io) {
  const NetworkConfig net = network_config_from_json(cfg.at("network"));
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const int reps = get<int>(cfg, "repeats");
  const int batch = get<int>(cfg, "batch_size");
  const int threads = get<int>(cfg, "threads");
  if (reps < 1 || batch < 1) throw Error(ErrorCode::InvalidConfig, "repeats and batch_size must be >= 1");
  Rng rng(seed);
  const Parameters params = Parameters::initialize(net, rng);
  std::vector<CanonicalViews> views;
  std::vector<int> labels;
  for (int i = 0; i < batch; ++i) {
    const PointCloud cloud = gen_shape(i % kNumShapeClasses, get<std::size_t>(cfg, "points"), rng);
    views.push_back(canonicalize(cloud));
    labels.push_back(i % std::min(kNumShapeClasses, net.num_classes));
  }
  const PointCloud probe = gen_shape(0, get<std::size_t>(cfg, "points"), rng);
  double sink = 0.0;
  const double t_canon = seconds_per_call(reps, [&] { sink += canonicalize(probe).center.x; });
  const double t_forward = seconds_per_call(reps, [&] { sink += forward(views[0], params, net)(0); });
  const double t_step = seconds_per_call(reps, [&] { sink += loss_and_grad(views, labels, params, net, threads).loss; });
  const Json metrics{{"command", "bench"},
                     {"config", cfg},
                     {"canonicalize_seconds", t_canon},
                     {"forward_seconds", t_forward},
                     {"train_step_seconds", t_step},
                     {"parameters", budget_json(net)},
                     {"checksum", sink},
                     {"stamp", stamp()}};
  emit(io, metrics, out_dir(cfg));
  return kExitOk;
}

Json with_shared(Json extra) {
  Json j = shared_defaults();
  for (auto& [key, value] : extra.items()) j[key] = value;
  return j;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Io io{out, err};
  CLI::App app{"Rotation-invariant point cloud classification with PCA canonical poses", "canopose"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(CANOPOSE_VERSION) + " (" + CANOPOSE_GIT + ")");

  std::vector<std::unique_ptr<Command>> commands;
  auto add = [&](const std::string& name, const std::string& help, Json defaults, auto run) -> Command& {
    auto cmd = std::make_unique<Command>();
    cmd->name = name;
    cmd->app = app.add_subcommand(name, help);
    cmd->defaults = with_shared(std::move(defaults));
    cmd->run = run;
    cmd->app->add_option("--config", cmd->config_path, "JSON config file; flags override it");
    add_flag<std::uint64_t>(*cmd, "--seed", "seed", "Master seed");
    add_flag<int>(*cmd, "--threads", "threads", "Worker cap (default: CANOPOSE_THREADS or 1)");
    add_flag<std::string>(*cmd, "--out", "out", "Output directory");
    commands.push_back(std::move(cmd));
    return *commands.back();
  };

  {
    Command& c = add("canonicalize", "Write the four canonical views of a cloud",
                     {{"input", nullptr}, {"samples", 1024}}, cmd_canonicalize);
    add_flag<std::string>(c, "input", "input", "XYZ or OFF file");
    add_flag<std::size_t>(c, "--samples", "samples", "Points sampled from an OFF mesh");
  }
  {
    Command& c = add("gen-dataset", "Generate a synthetic train/test split",
                     {{"classes", {0, 1, 2, 3, 4, 5}},
                      {"points", 256},
                      {"protocol", "SO3/SO3"},
                      {"train_size", 512},
                      {"test_size", 128},
                      {"train_per_class", nullptr},
                      {"test_per_class", nullptr}},
                     cmd_gen_dataset);
    add_flag<std::string>(c, "--protocol", "protocol", "z/z, z/SO3 or SO3/SO3");
    add_flag<std::size_t>(c, "--points", "points", "Points per cloud");
    add_flag<int>(c, "--train-size", "train_size", "Training clouds, spread over the classes");
    add_flag<int>(c, "--test-size", "test_size", "Test clouds, spread over the classes");
  }
  {
    Command& c = add("augment", "Apply random scaling, rotation and jitter to a cloud",
                     {{"input", nullptr}, {"samples", 1024}, {"copies", 1}, {"augment", augment_defaults()}},
                     cmd_augment);
    add_flag<std::string>(c, "input", "input", "XYZ or OFF file");
    add_flag<int>(c, "--copies", "copies", "Number of augmented copies");
    add_flag<double>(c, "--scale-bound", "augment.scale_bound", "Upper bound M of the scale draw");
    add_switch(c, "--random-scaling", "augment.random_scaling", "Enable random scaling");
    add_flag<std::string>(c, "--rotation", "augment.rotation", "none, z or SO3");
    add_flag<double>(c, "--jitter", "augment.jitter_sigma", "Gaussian jitter sigma");
  }
  {
    const TrainConfig t;
    Command& c = add("train", "Train a classifier on a dataset directory",
                     {{"dataset", nullptr},
                      {"network", to_json(NetworkConfig{})},
                      {"epochs", t.epochs},
                      {"batch_size", t.batch_size},
                      {"learning_rate", t.learning_rate},
                      {"momentum", t.momentum},
                      {"weight_decay", t.weight_decay},
                      {"lr_schedule", t.lr_schedule},
                      {"augment", augment_defaults()},
                      {"resume", nullptr},
                      {"stop_after", nullptr},
                      {"eval_test", true}},
                     cmd_train);
    add_flag<std::string>(c, "--dataset", "dataset", "Dataset directory");
    add_flag<int>(c, "--epochs", "epochs", "Total epochs of the schedule");
    add_flag<int>(c, "--batch-size", "batch_size", "Clouds per step");
    add_flag<double>(c, "--lr", "learning_rate", "Initial learning rate");
    add_flag<std::string>(c, "--fusion", "network.fusion", "max_pool, avg_pool, pool_before_fuse or fuse_before_pool");
    add_switch(c, "--random-scaling", "augment.random_scaling", "Enable random scaling");
    add_flag<double>(c, "--scale-bound", "augment.scale_bound", "Upper bound M of the scale draw");
    add_flag<std::string>(c, "--resume", "resume", "Checkpoint to continue from");
    add_flag<int>(c, "--stop-after", "stop_after", "Stop after this many total epochs");
  }
  {
    Command& c = add("eval", "Evaluate a checkpoint on a dataset",
                     {{"checkpoint", nullptr},
                      {"dataset", nullptr},
                      {"split", "test"},
                      {"network", nullptr},
                      {"augment", augment_defaults()},
                      {"include_logits", true}},
                     cmd_eval);
    add_flag<std::string>(c, "--checkpoint", "checkpoint", "Checkpoint file");
    add_flag<std::string>(c, "--dataset", "dataset", "Dataset directory");
    add_flag<std::string>(c, "--split", "split", "train or test");
    add_flag<std::string>(c, "--rotation", "augment.rotation", "Extra rotation of every cloud: none, z or SO3");
    add_switch(c, "--random-scaling", "augment.random_scaling", "Scale every cloud by random per-axis factors");
    add_flag<double>(c, "--scale-bound", "augment.scale_bound", "Upper bound M of the scale draw");
  }
  {
    const InvarianceConfig d;
    Command& c = add("check-invariance", "Run the invariance property battery",
                     {{"trials", d.pose_trials},
                      {"logit_trials", d.logit_trials},
                      {"permutation_trials", d.permutation_trials},
                      {"fusion_weight_checks", d.fusion_weight_checks},
                      {"points", d.points},
                      {"gradient_check", d.gradient_check},
                      {"gradient_samples", d.gradient_samples},
                      {"inject_fault", false}},
                     cmd_check_invariance);
    add_flag<int>(c, "--trials", "trials", "Pose-set and closure trials");
    add_flag<int>(c, "--logit-trials", "logit_trials", "End-to-end logit trials");
    add_switch(c, "--inject-fault", "inject_fault", "Break pose_space on purpose (negative control)");
  }
  {
    Command& c = add("bench", "Time canonicalization, inference and a training step",
                     {{"network", to_json(NetworkConfig{})}, {"points", 256}, {"batch_size", 16}, {"repeats", 5}},
                     cmd_bench);
    add_flag<int>(c, "--repeats", "repeats", "Timed repetitions");
    add_flag<std::size_t>(c, "--points", "points", "Points per cloud");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (const auto& cmd : commands) {
    if (!cmd->app->parsed()) continue;
    try {
      const Json cfg = resolve_config(*cmd);
      err << "canopose " << cmd->name << " config: " << cfg.dump() << '\n';
      return cmd->run(cfg, io);
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const Json::exception& e) {
      err << "error: InvalidConfig: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitUsage;
    }
  }
  return kExitUsage;
}

}  // namespace canopose
