#pragma once

// Versioned binary weight container:
//   magic "KLGCKPT1" | u64 header length | JSON header | u64 count | f64[count]
// All integers and doubles little-endian. The JSON header carries the layer
// specs, input shape, seed and free-form tags (head kind, trunk hash, ...).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "klgrade/network.hpp"

namespace klg {

struct Checkpoint {
  Network net;
  std::uint64_t seed = 0;
  nlohmann::json tags = nlohmann::json::object();
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json layer_to_json(const LayerSpec& spec);
LayerSpec layer_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace klg
