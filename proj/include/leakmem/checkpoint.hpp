#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "leakmem/config.hpp"

namespace leakmem {

// Layout: 8-byte magic, u64 LE header length, JSON header, f32 LE payload.
inline constexpr std::array<char, 8> kCheckpointMagic{'L', 'K', 'M', 'E', 'M', 'C', 'K', 'P'};
inline constexpr std::uint64_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  RunConfig config;
  std::vector<CheckpointTensor> tensors;  // generator side, then discriminator

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(char((u >> (8 * i)) & 0xff));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= std::uint32_t(p[i]) << (8 * i);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

/// Scalar counts per module prefix ("enc", "emi", "base", "edi", "gen", "disc").
inline nlohmann::json parameter_counts(const std::vector<CheckpointTensor>& tensors) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tensors) counts[t.name.substr(0, t.name.find('.'))] += t.values.size();
  return counts;
}

}  // namespace detail

template <class Real>
Checkpoint capture(const Model<Real>& model, const RunConfig& config) {
  Checkpoint c;
  c.config = config;
  for (const auto* set : {&model.params(), &model.disc_params()}) {
    for (const auto& e : set->entries()) {
      c.tensors.push_back({e.name, e.tensor.shape(), std::vector<float>(e.tensor.data().begin(), e.tensor.data().end())});
    }
  }
  return c;
}

inline std::string serialize(const Checkpoint& c) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = to_json(c.config);
  header["parameter_counts"] = detail::parameter_counts(c.tensors);
  auto& manifest = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (shape_size(t.shape) != t.values.size()) throw CheckpointError("tensor " + t.name + ": shape/value mismatch");
    manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", offset}});
    offset += 4 * t.values.size();
  }
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& t : c.tensors) {
    for (float v : t.values) detail::put_f32(out, v);
  }
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16) {
    throw CheckpointError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes, need at least 16");
  }
  if (std::memcmp(p, kCheckpointMagic.data(), 8) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint64_t header_len = detail::get_u64(p + 8);
  if (header_len > bytes.size() - 16) {
    throw CheckpointError("checkpoint truncated: header needs " + std::to_string(header_len) + " bytes, " +
                          std::to_string(bytes.size() - 16) + " available");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  try {
    const auto version = header.at("format_version").get<std::uint64_t>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    const std::uint64_t available = bytes.size() - 16 - header_len;
    if (available != payload_bytes) {
      throw CheckpointError("checkpoint payload is " + std::to_string(available) + " bytes, manifest declares " +
                            std::to_string(payload_bytes));
    }
    const unsigned char* payload = p + 16 + header_len;
    Checkpoint c;
    c.config = parse_config(header.at("config"));
    for (const auto& entry : header.at("tensors")) {
      CheckpointTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      if (entry.at("dtype").get<std::string>() != "f32") throw CheckpointError("tensor " + t.name + ": dtype must be f32");
      const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
      const std::uint64_t n = shape_size(t.shape);
      if (offset % 4 != 0 || offset + 4 * n > payload_bytes) {
        throw CheckpointError("tensor " + t.name + " spans bytes [" + std::to_string(offset) + ", " +
                              std::to_string(offset + 4 * n) + ") outside the " + std::to_string(payload_bytes) +
                              "-byte payload");
      }
      if (c.find(t.name)) throw CheckpointError("tensor " + t.name + " appears twice in the manifest");
      t.values.resize(n);
      for (std::uint64_t i = 0; i < n; ++i) t.values[i] = detail::get_f32(payload + offset + 4 * i);
      c.tensors.push_back(std::move(t));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint manifest malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config snapshot invalid: ") + e.what());
  }
}

/// Builds a model from the snapshot config and copies every tensor in.
/// Each model parameter must appear exactly once with a matching shape.
template <class Real>
std::unique_ptr<Model<Real>> restore_model(const Checkpoint& c) {
  const auto& cfg = c.config;
  auto model = std::make_unique<Model<Real>>(cfg.model, cfg.train.flags, cfg.world.d_img, cfg.seed);
  std::size_t matched = 0;
  for (auto* set : {&model->params(), &model->disc_params()}) {
    for (auto& e : set->entries()) {
      const auto* t = c.find(e.name);
      if (!t) throw CheckpointError("checkpoint lacks parameter " + e.name);
      if (t->shape != e.tensor.shape()) {
        throw CheckpointError("parameter " + e.name + ": checkpoint shape " + shape_string(t->shape) + " vs model " +
                              shape_string(e.tensor.shape()));
      }
      auto dst = e.tensor.mutable_data();
      for (std::size_t i = 0; i < t->values.size(); ++i) dst[i] = static_cast<Real>(t->values[i]);
      ++matched;
    }
  }
  if (matched != c.tensors.size()) throw CheckpointError("checkpoint holds tensors the model does not declare");
  return model;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes to a sibling temp file, then renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize(read_file(path)); }

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, serialize(c));
}

}  // namespace leakmem
