#pragma once

// .htw weight files and checkpoint run directories.
//
// Layout: "HTRC" | u32 LE version | u64 LE header length | UTF-8 JSON header |
// f32 LE payload, tensors row-major in manifest order. The header holds the
// full ModelConfig, the tensor manifest (name, shape, byte offset, dtype) and
// a free-form metadata object.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hallucitrace/model.hpp"
#include "json.hpp"

namespace hallucitrace {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedPayloadError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class ManifestMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr char kHtwMagic[4] = {'H', 'T', 'R', 'C'};
inline constexpr std::uint32_t kHtwVersion = 1;

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes via a temporary sibling then renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Serializes weights to .htw bytes. Values are stored as f32 whatever T is.
template <std::floating_point T>
std::string encode_weights(const TransformerWeights<T>& w, const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json header;
  header["config"] = w.config;
  header["metadata"] = metadata;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : w.params) {
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}, {"dtype", "f32"}});
    offset += 4 * p.value.size();
  }
  const std::string text = header.dump();
  std::string out(kHtwMagic, 4);
  detail::put_le(out, kHtwVersion, 4);
  detail::put_le(out, text.size(), 8);
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& p : w.params) {
    for (T v : p.value.data()) detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  return out;
}

struct LoadedWeights {
  TransformerWeights<float> weights;
  nlohmann::json metadata;
};

inline LoadedWeights decode_weights(const std::string& bytes, const std::string& source = "<memory>") {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kHtwMagic, 4) != 0) {
    throw BadMagicError("'" + source + "' is not a weight file (missing HTRC magic)");
  }
  if (bytes.size() < 16) throw TruncatedPayloadError("'" + source + "' ends inside the fixed header");
  const auto version = detail::get_le(bytes, 4, 4);
  if (version != kHtwVersion) {
    throw VersionMismatchError("'" + source + "' has format version " + std::to_string(version) + ", expected " +
                               std::to_string(kHtwVersion));
  }
  const auto header_len = detail::get_le(bytes, 8, 8);
  if (header_len > bytes.size() - 16) throw TruncatedPayloadError("'" + source + "' ends inside the header text");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ManifestMismatchError("'" + source + "' header is not valid: " + e.what());
  }
  LoadedWeights out;
  std::vector<std::pair<std::string, Shape>> expected;
  try {
    out.weights.config = header.at("config").get<ModelConfig>();
    out.weights.config.validate();
    out.metadata = header.value("metadata", nlohmann::json::object());
    expected = TransformerWeights<float>::manifest(out.weights.config);
  } catch (const std::exception& e) {
    throw ManifestMismatchError("'" + source + "' has an invalid config: " + e.what());
  }
  const auto& tensors = header.at("tensors");
  if (!tensors.is_array() || tensors.size() != expected.size()) {
    throw ManifestMismatchError("'" + source + "' lists " + std::to_string(tensors.size()) +
                                " tensors, the config requires " + std::to_string(expected.size()));
  }
  const std::size_t base = 16 + header_len;
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& t = tensors[i];
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    if (name != expected[i].first || shape != expected[i].second || t.at("dtype").get<std::string>() != "f32" ||
        t.at("offset").get<std::uint64_t>() != offset) {
      throw ManifestMismatchError("'" + source + "' tensor " + std::to_string(i) + " is " + name + " " +
                                  shape_string(shape) + ", expected " + expected[i].first + " " +
                                  shape_string(expected[i].second) + " at offset " + std::to_string(offset));
    }
    const std::size_t n = shape_size(shape);
    if (base + offset + 4 * n > bytes.size()) {
      throw TruncatedPayloadError("'" + source + "' payload ends inside tensor " + name + " (file has " +
                                  std::to_string(bytes.size() - base) + " payload bytes, manifest needs " +
                                  std::to_string(offset + 4 * n) + ")");
    }
    std::vector<float> data(n);
    for (std::size_t k = 0; k < n; ++k) {
      data[k] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, base + offset + 4 * k, 4)));
    }
    out.weights.params.emplace_back(name, Tensor<float>(shape, std::move(data)));
    offset += 4 * n;
  }
  if (base + offset != bytes.size()) {
    throw ManifestMismatchError("'" + source + "' has " + std::to_string(bytes.size() - base - offset) +
                                " trailing payload bytes not covered by the manifest");
  }
  return out;
}

template <std::floating_point T>
void save_weights(const std::filesystem::path& path, const TransformerWeights<T>& w,
                  const nlohmann::json& metadata = nlohmann::json::object()) {
  detail::write_file_atomic(path, encode_weights(w, metadata));
}

inline LoadedWeights load_weights(const std::filesystem::path& path) {
  return decode_weights(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Run directories: step-NNNNNN.htw files plus run.json listing the steps.

inline std::string checkpoint_filename(std::uint64_t step) {
  std::ostringstream ss;
  ss << "step-" << std::setw(6) << std::setfill('0') << step << ".htw";
  return ss.str();
}

struct RunManifest {
  std::vector<std::uint64_t> steps;
  nlohmann::json info = nlohmann::json::object();

  static std::filesystem::path path_in(const std::filesystem::path& dir) { return dir / "run.json"; }

  static RunManifest load(const std::filesystem::path& dir) {
    RunManifest m;
    const auto p = path_in(dir);
    if (!std::filesystem::exists(p)) return m;
    auto j = nlohmann::json::parse(detail::read_file(p));
    m.steps = j.at("steps").get<std::vector<std::uint64_t>>();
    m.info = j.value("info", nlohmann::json::object());
    return m;
  }

  void save(const std::filesystem::path& dir) const {
    nlohmann::json j{{"steps", steps}, {"info", info}};
    detail::write_file_atomic(path_in(dir), j.dump(2) + "\n");
  }
};

/// Writes step-NNNNNN.htw and records the step in run.json. Steps must increase.
template <std::floating_point T>
void write_checkpoint(const std::filesystem::path& dir, std::uint64_t step, const TransformerWeights<T>& w,
                      const nlohmann::json& metadata = nlohmann::json::object()) {
  auto m = RunManifest::load(dir);
  if (!m.steps.empty() && step <= m.steps.back()) {
    throw CheckpointError("checkpoint step " + std::to_string(step) + " does not follow step " +
                          std::to_string(m.steps.back()));
  }
  auto meta = metadata;
  meta["step"] = step;
  save_weights(dir / checkpoint_filename(step), w, meta);
  m.steps.push_back(step);
  m.save(dir);
}

}  // namespace hallucitrace
