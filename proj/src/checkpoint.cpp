#include "canopose/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "canopose/error.hpp"

namespace canopose {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'N', 'O', 'P', 'O', 'S', 'E'};

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw Error(ErrorCode::ParseError, "truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<T>(v);
}

void put_array(std::ostream& out, const std::string& name, std::span<const double> values,
               const std::vector<std::size_t>& shape) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put_le<std::uint64_t>(out, d);
  put_le<std::uint64_t>(out, values.size() * sizeof(float));
  for (double v : values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

struct RawArray {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

RawArray get_array(std::istream& in) {
  RawArray a;
  const auto name_len = get_le<std::uint32_t>(in);
  if (name_len > 4096) throw Error(ErrorCode::ParseError, "array name too long");
  a.name.resize(name_len);
  if (!in.read(a.name.data(), name_len)) throw Error(ErrorCode::ParseError, "truncated array name");
  const auto rank = get_le<std::uint32_t>(in);
  if (rank > 8) throw Error(ErrorCode::ParseError, "array rank too large");
  std::size_t elements = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    a.shape.push_back(get_le<std::uint64_t>(in));
    elements *= a.shape.back();
  }
  const auto bytes = get_le<std::uint64_t>(in);
  if (bytes != elements * sizeof(float)) throw Error(ErrorCode::ParseError, "byte length disagrees with shape of " + a.name);
  a.data.resize(elements);
  for (auto& v : a.data) v = std::bit_cast<float>(get_le<std::uint32_t>(in));
  return a;
}

void fill_from(Parameters& params, const std::vector<RawArray>& arrays, std::size_t& cursor, const std::string& prefix) {
  params.visit([&](const std::string& name, std::span<double> values, const std::vector<std::size_t>& shape) {
    if (cursor >= arrays.size()) throw Error(ErrorCode::CheckpointMismatch, "missing array " + prefix + name);
    const RawArray& a = arrays[cursor++];
    if (a.name != prefix + name || a.shape != shape) {
      throw Error(ErrorCode::CheckpointMismatch, "expected " + prefix + name + ", found " + a.name);
    }
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(a.data[i]);
  });
}

}  // namespace

nlohmann::json to_json(const NetworkConfig& cfg) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : cfg.stages) {
    stages.push_back({{"hidden", s.hidden}, {"out", s.out}, {"k", s.k}, {"downsample", s.downsample}});
  }
  return {{"in_channels", cfg.in_channels},   {"stages", stages},
          {"fusion_hidden", cfg.fusion_hidden}, {"head_hidden", cfg.head_hidden},
          {"num_classes", cfg.num_classes},   {"fusion", std::string(to_string(cfg.fusion))}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys{"in_channels", "stages", "fusion_hidden", "head_hidden", "num_classes", "fusion"};
  static const std::set<std::string> kStageKeys{"hidden", "out", "k", "downsample"};
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "network config must be an object");
  NetworkConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (!kKeys.count(key)) throw Error(ErrorCode::InvalidConfig, "unknown network key '" + key + "'");
    }
    if (j.contains("in_channels")) cfg.in_channels = j.at("in_channels").get<int>();
    if (j.contains("stages")) {
      cfg.stages.clear();
      for (const auto& s : j.at("stages")) {
        for (const auto& [key, value] : s.items()) {
          if (!kStageKeys.count(key)) throw Error(ErrorCode::InvalidConfig, "unknown stage key '" + key + "'");
        }
        StageConfig st;
        st.hidden = s.value("hidden", st.hidden);
        st.out = s.value("out", st.out);
        st.k = s.value("k", st.k);
        st.downsample = s.value("downsample", st.downsample);
        cfg.stages.push_back(st);
      }
    }
    if (j.contains("fusion_hidden")) cfg.fusion_hidden = j.at("fusion_hidden").get<std::vector<int>>();
    if (j.contains("head_hidden")) cfg.head_hidden = j.at("head_hidden").get<std::vector<int>>();
    if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<int>();
    if (j.contains("fusion")) cfg.fusion = parse_fusion_mode(j.at("fusion").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("network config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = nlohmann::json{{"network", to_json(ckpt.network)}, {"meta", ckpt.meta}}.dump();
  put_le<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  std::uint32_t count = 0;
  ckpt.params.visit([&](const std::string&, std::span<const double>, const std::vector<std::size_t>&) { ++count; });
  put_le<std::uint32_t>(out, ckpt.velocity ? 2 * count : count);
  ckpt.params.visit([&](const std::string& name, std::span<const double> v, const std::vector<std::size_t>& shape) {
    put_array(out, name, v, shape);
  });
  if (ckpt.velocity) {
    ckpt.velocity->visit([&](const std::string& name, std::span<const double> v, const std::vector<std::size_t>& shape) {
      put_array(out, "momentum." + name, v, shape);
    });
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::ParseError, path.string() + " is not a checkpoint");
  }
  if (get_le<std::uint32_t>(in) != kCheckpointVersion) throw Error(ErrorCode::ParseError, "unsupported checkpoint version");
  const auto header_len = get_le<std::uint64_t>(in);
  if (header_len > (1u << 24)) throw Error(ErrorCode::ParseError, "config block too large");
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) throw Error(ErrorCode::ParseError, "truncated config block");

  Checkpoint ckpt;
  try {
    const auto j = nlohmann::json::parse(header);
    ckpt.network = network_config_from_json(j.at("network"));
    ckpt.meta = j.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("config block: ") + e.what());
  }

  const auto count = get_le<std::uint32_t>(in);
  std::vector<RawArray> arrays;
  for (std::uint32_t i = 0; i < count; ++i) arrays.push_back(get_array(in));

  ckpt.params = Parameters::zeros(ckpt.network);
  std::size_t cursor = 0;
  fill_from(ckpt.params, arrays, cursor, "");
  if (cursor < arrays.size()) {
    Parameters velocity = Parameters::zeros(ckpt.network);
    fill_from(velocity, arrays, cursor, "momentum.");
    ckpt.velocity = std::move(velocity);
  }
  if (cursor != arrays.size()) throw Error(ErrorCode::CheckpointMismatch, "unexpected trailing arrays");
  return ckpt;
}

}  // namespace canopose
