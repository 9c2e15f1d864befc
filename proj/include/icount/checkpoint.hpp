#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "icount/network.hpp"

namespace icount {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'K', 'P', 'T', '0', '1', '\n'};

inline nlohmann::json network_to_json(const NetworkConfig& cfg) {
  return {{"stride", cfg.stride},
          {"extractor_channels", cfg.extractor_channels},
          {"head_channels", cfg.head_channels},
          {"adaptor_bias", cfg.adaptor_bias}};
}

inline NetworkConfig network_from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  cfg.stride = j.at("stride").get<std::size_t>();
  cfg.extractor_channels = j.at("extractor_channels").get<std::vector<std::size_t>>();
  cfg.head_channels = j.at("head_channels").get<std::vector<std::size_t>>();
  cfg.adaptor_bias = j.at("adaptor_bias").get<bool>();
  cfg.validate();
  return cfg;
}

namespace detail {

inline void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

template <typename T>
ParameterList<T> archive_parameters(const ModelState<T>& s) {
  ParameterList<T> all = s.current.parameters("f_t");
  auto append = [&](const ParameterList<T>& ps) { all.insert(all.end(), ps.begin(), ps.end()); };
  if (s.previous) append(s.previous->parameters("f_prev"));
  for (std::size_t i = 0; i < s.heads.size(); ++i) append(s.heads[i].parameters("head/" + std::to_string(i + 1)));
  for (std::size_t i = 0; i < s.lwf_heads.size(); ++i) {
    append(s.lwf_heads[i].parameters("lwf_head/" + std::to_string(i + 1)));
  }
  for (std::size_t i = 0; i < s.adaptors.size(); ++i) {
    append(s.adaptors[i].parameters("adaptor/" + std::to_string(i + 1)));
  }
  return all;
}

inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Serializes the full model state plus caller metadata. Values are stored as
/// little-endian float64, so double-precision states round-trip bit-exactly.
template <typename T>
std::string encode_checkpoint(const ModelState<T>& s, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["network"] = network_to_json(s.network);
  manifest["method"] = to_string(s.method);
  manifest["tasks"] = s.tasks;
  manifest["has_previous"] = s.previous.has_value();
  manifest["heads"] = s.heads.size();
  manifest["lwf_heads"] = s.lwf_heads.size();
  manifest["adaptors"] = s.adaptors.size();
  manifest["head_checksums"] = s.head_checksums;
  manifest["extra"] = extra;

  std::string payload;
  nlohmann::json blocks = nlohmann::json::array();
  auto add_block = [&](const std::string& path, const Shape& shape, auto begin, auto end) {
    blocks.push_back({{"path", path}, {"shape", shape}});
    for (auto it = begin; it != end; ++it) detail::put_f64(payload, static_cast<double>(*it));
  };
  for (const auto& p : detail::archive_parameters(s)) {
    add_block(p.path, p.tensor.shape(), p.tensor.data().begin(), p.tensor.data().end());
  }
  for (const auto& [path, entry] : s.importance) {
    add_block("importance/" + path + "/omega", Shape{entry.omega.size()}, entry.omega.begin(), entry.omega.end());
    add_block("importance/" + path + "/anchor", Shape{entry.anchor.size()}, entry.anchor.begin(), entry.anchor.end());
  }
  manifest["blocks"] = blocks;

  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

template <typename T>
struct LoadedCheckpoint {
  ModelState<T> state;
  nlohmann::json extra;
};

template <typename T>
LoadedCheckpoint<T> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint archive");
  }
  const std::uint64_t len = detail::get_u64(bytes.data() + 8);
  if (16 + len > bytes.size()) throw CheckpointError("truncated checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
  }

  LoadedCheckpoint<T> out;
  auto& s = out.state;
  try {
    s.network = network_from_json(manifest.at("network"));
    s.method = parse_method(manifest.at("method").get<std::string>());
    s.tasks = manifest.at("tasks").get<std::vector<std::string>>();
    s.head_checksums = manifest.at("head_checksums").get<std::vector<std::uint64_t>>();
    s.current = FeatureExtractor<T>(s.network);
    if (manifest.at("has_previous").get<bool>()) s.previous = FeatureExtractor<T>(s.network);
    const std::size_t d = s.network.feature_channels();
    for (std::size_t i = 0; i < manifest.at("heads").get<std::size_t>(); ++i) s.heads.emplace_back(d, s.network.head_channels);
    for (std::size_t i = 0; i < manifest.at("lwf_heads").get<std::size_t>(); ++i) {
      s.lwf_heads.emplace_back(d, s.network.head_channels);
    }
    for (std::size_t i = 0; i < manifest.at("adaptors").get<std::size_t>(); ++i) {
      s.adaptors.emplace_back(d, s.network.adaptor_bias);
    }
    out.extra = manifest.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("incomplete checkpoint manifest: ") + e.what());
  }

  std::map<std::string, Tensor<T>> targets;
  for (auto& p : detail::archive_parameters(s)) targets.emplace(p.path, p.tensor);

  std::size_t offset = 16 + len;
  std::size_t filled = 0;
  for (const auto& block : manifest.at("blocks")) {
    const auto path = block.at("path").get<std::string>();
    const auto shape = block.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (offset + 8 * n > bytes.size()) throw CheckpointError("truncated checkpoint data at " + path);
    std::vector<double> values(n);
    for (std::size_t k = 0; k < n; ++k) values[k] = detail::get_f64(bytes.data() + offset + 8 * k);
    offset += 8 * n;

    if (path.rfind("importance/", 0) == 0) {
      const auto slash = path.rfind('/');
      const auto key = path.substr(11, slash - 11);
      const auto field = path.substr(slash + 1);
      (field == "omega" ? s.importance[key].omega : s.importance[key].anchor) = std::move(values);
      continue;
    }
    auto it = targets.find(path);
    if (it == targets.end()) throw CheckpointError("unexpected checkpoint block " + path);
    if (it->second.shape() != shape) {
      throw CheckpointError("shape mismatch for " + path + ": stored " + shape_str(shape) + ", model " +
                            shape_str(it->second.shape()));
    }
    auto dst = it->second.data();
    for (std::size_t k = 0; k < n; ++k) dst[k] = static_cast<T>(values[k]);
    ++filled;
  }
  if (filled != targets.size()) throw CheckpointError("checkpoint is missing parameter blocks");
  if (offset != bytes.size()) throw CheckpointError("trailing bytes after checkpoint data");

  if (s.previous) s.previous->freeze();
  for (std::size_t i = 0; i < s.head_checksums.size() && i < s.heads.size(); ++i) s.heads[i].freeze();
  for (auto& a : s.adaptors) a.freeze();
  verify_frozen_heads(s);
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelState<T>& s,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  detail::write_atomic(path, encode_checkpoint(s, extra));
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint<T>(bytes);
}

}  // namespace icount
