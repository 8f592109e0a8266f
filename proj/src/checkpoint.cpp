#include "klgrade/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "klgrade/error.hpp"

namespace klg {
namespace {

constexpr char kMagic[8] = {'K', 'L', 'G', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::vector<std::uint8_t>& in, std::size_t& at) {
  if (in.size() - at < 8) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  at += 8;
  return v;
}

}  // namespace

nlohmann::json layer_to_json(const LayerSpec& s) {
  nlohmann::json j{{"kind", to_string(s.kind)}};
  switch (s.kind) {
    case LayerKind::conv2d:
      j.update({{"in", s.in_channels}, {"out", s.out_channels}, {"kernel", s.kernel},
                {"stride", s.stride}, {"pad", s.pad}});
      break;
    case LayerKind::dense:
      j.update({{"in", s.in_channels}, {"out", s.out_channels}});
      break;
    case LayerKind::dense_block:
      j.update({{"in", s.in_channels}, {"growth", s.growth}, {"layers", s.layers},
                {"kernel", s.kernel}});
      break;
    default:
      break;
  }
  return j;
}

LayerSpec layer_from_json(const nlohmann::json& j) {
  const auto kind = layer_kind_from_string(j.at("kind").get<std::string>());
  switch (kind) {
    case LayerKind::conv2d:
      return LayerSpec::conv_padded(j.at("in"), j.at("out"), j.at("kernel"), j.at("stride"),
                                    j.at("pad"));
    case LayerKind::dense:
      return LayerSpec::dense(j.at("in"), j.at("out"));
    case LayerKind::dense_block:
      return LayerSpec::dense_block(j.at("in"), j.at("growth"), j.at("layers"), j.at("kernel"));
    case LayerKind::relu:
      return LayerSpec::relu();
    case LayerKind::global_avg_pool:
      return LayerSpec::global_avg_pool();
    case LayerKind::flatten:
      return LayerSpec::flatten();
  }
  throw ValueError("unreachable layer kind");
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["input_shape"] = ckpt.net.input_shape();
  header["layers"] = nlohmann::json::array();
  for (const auto& s : ckpt.net.layers()) header["layers"].push_back(layer_to_json(s));
  header["seed"] = ckpt.seed;
  header["architecture_hash"] = ckpt.net.architecture_hash();
  header["tags"] = ckpt.tags;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  put_u64(out, ckpt.net.parameter_count());
  for (const auto& p : ckpt.net.parameters())
    for (double v : p.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw IoError("not a klgrade checkpoint (bad magic)");
  std::size_t at = 8;
  const auto header_len = get_u64(bytes, at);
  if (header_len > bytes.size() - at) throw IoError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(at + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header: ") + e.what());
  }
  at += header_len;
  if (header.value("format_version", 0) != 1) throw IoError("unsupported checkpoint version");

  Checkpoint ckpt;
  try {
    std::vector<LayerSpec> layers;
    for (const auto& j : header.at("layers")) layers.push_back(layer_from_json(j));
    ckpt.net = Network(header.at("input_shape").get<Shape>(), std::move(layers));
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.tags = header.value("tags", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header: ") + e.what());
  }
  if (header.value("architecture_hash", std::uint64_t{0}) != ckpt.net.architecture_hash())
    throw IoError("checkpoint architecture hash mismatch");

  const auto count = get_u64(bytes, at);
  if (count != ckpt.net.parameter_count() || (bytes.size() - at) / 8 != count ||
      (bytes.size() - at) % 8 != 0)
    throw IoError("checkpoint weight block does not match its layer specs");
  for (auto& p : ckpt.net.parameters())
    for (double& v : p.data()) v = std::bit_cast<double>(get_u64(bytes, at));
  return ckpt;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace klg
