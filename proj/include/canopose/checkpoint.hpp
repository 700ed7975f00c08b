#pragma once

#include <filesystem>
#include <optional>

#include <nlohmann/json.hpp>

#include "canopose/net.hpp"

namespace canopose {

nlohmann::json to_json(const NetworkConfig& cfg);
/// Rejects unknown keys with InvalidConfig; missing keys keep defaults.
NetworkConfig network_config_from_json(const nlohmann::json& j);

/// On-disk layout, all integers little-endian:
///   "CANOPOSE" | u32 version | u64 n | n bytes of JSON {"network", "meta"}
///   u32 array count, then per array:
///   u32 name length | name | u32 rank | u64 dims[rank] | u64 byte length | f32 data
/// Parameter arrays come first in declaration order, then momentum buffers
/// named "momentum.<array>".
struct Checkpoint {
  NetworkConfig network;
  nlohmann::json meta = nlohmann::json::object();
  Parameters params;
  std::optional<Parameters> velocity;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws ParseError on a malformed file and CheckpointMismatch when array
/// names or shapes disagree with the embedded network config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace canopose
