#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "leakmem/pipeline.hpp"

namespace leakmem {

/// Invalid or incomplete configuration; `field()` is the dotted path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  WorldConfig world;
  ModelConfig model;
  TrainConfig train;
  std::string output_dir;
};

namespace detail {

using nlohmann::json;

class FieldReader {
 public:
  FieldReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return obj_.contains(key); }

  const json& at(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  template <class T>
  void read(const std::string& key, T& out, bool required = false) {
    if (!obj_.contains(key)) {
      if (required) throw ConfigError(path_of(key), "required field is missing");
      return;
    }
    const json& v = at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path_of(key), "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(path_of(key), "expected a non-negative integer");
      }
      out = static_cast<T>(v.get<std::uint64_t>());
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path_of(key), "expected a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(path_of(key), "expected a string");
      out = v.get<std::string>();
    }
  }

  FieldReader child(const std::string& key) { return FieldReader(at(key), path_of(key)); }

  void reject_unknown() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path_of(it.key()), "unknown field");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class T, std::size_t N>
void read_array(FieldReader& r, const std::string& key, std::array<T, N>& out) {
  if (!r.has(key)) return;
  const auto& v = r.at(key);
  if (!v.is_array() || v.size() != N) throw ConfigError(r.path_of(key), "expected an array of " + std::to_string(N));
  for (std::size_t i = 0; i < N; ++i) {
    if (!v[i].is_number_integer() || v[i].get<std::int64_t>() <= 0) {
      throw ConfigError(r.path_of(key) + "[" + std::to_string(i) + "]", "expected a positive integer");
    }
    out[i] = v[i].get<T>();
  }
}

inline void require_positive(const std::string& field, double v) {
  if (!(v > 0)) throw ConfigError(field, "must be positive");
}

}  // namespace detail

/// Validates cross-field constraints; throws ConfigError naming the field.
inline void validate(const RunConfig& c) {
  using detail::require_positive;
  const auto& w = c.world;
  require_positive("world.d_id", double(w.d_id));
  require_positive("world.d_mo", double(w.d_mo));
  require_positive("world.d_img", double(w.d_img));
  require_positive("world.mixing_depth", double(w.mixing_depth));
  require_positive("world.render_width", double(w.render_width));
  if (w.identity_count < 2) throw ConfigError("world.identity_count", "must be at least 2");
  if (w.motions_per_identity == 1) throw ConfigError("world.motions_per_identity", "must be 0 or at least 2");
  const auto& m = c.model;
  for (std::size_t k = 1; k < kScaleCount; ++k) {
    if (m.scale_sides[k] >= m.scale_sides[k - 1]) {
      throw ConfigError("model.scale_sides", "spatial sizes must strictly decrease");
    }
  }
  for (auto [name, v] : {std::pair{"d_top", m.d_top}, {"d_z", m.d_z}, {"d_model", m.d_model},
                         {"query_tokens", m.query_tokens}, {"slots", m.slots}, {"d_c", m.d_c}, {"heads", m.heads},
                         {"generator_width", m.generator_width}, {"discriminator_width", m.discriminator_width}}) {
    require_positive(std::string("model.") + name, double(v));
  }
  if (m.d_c > m.scale_channels[kQueryScale]) {
    throw ConfigError("model.d_c", "must not exceed the scale-4 channel count");
  }
  if (m.d_model % m.heads != 0) throw ConfigError("model.heads", "must divide d_model");
  require_positive("model.address_temperature", m.address_temperature);
  const auto& t = c.train;
  require_positive("train.batch_size", double(t.batch_size));
  require_positive("train.lr", t.optimizer.learning_rate);
  if (!(t.optimizer.beta1 >= 0 && t.optimizer.beta1 < 1)) throw ConfigError("train.beta1", "must be in [0, 1)");
  if (!(t.optimizer.beta2 >= 0 && t.optimizer.beta2 < 1)) throw ConfigError("train.beta2", "must be in [0, 1)");
  for (auto [name, v] : {std::pair{"rec", t.weights.rec}, {"adv", t.weights.adv}, {"dis", t.weights.dis},
                         {"dmem", t.weights.dmem}, {"align", t.weights.align}}) {
    if (!(v >= 0)) throw ConfigError(std::string("train.weights.") + name, "must be non-negative");
  }
}

/// Parses a config document. `seed` and `train.steps` are required; any
/// unknown key is an error.
inline RunConfig parse_config(const nlohmann::json& doc) {
  RunConfig c;
  detail::FieldReader root(doc, "");
  root.read("seed", c.seed, true);
  root.read("output_dir", c.output_dir);

  if (root.has("world")) {
    auto r = root.child("world");
    auto& w = c.world;
    r.read("seed", w.seed);
    r.read("d_id", w.d_id);
    r.read("d_mo", w.d_mo);
    r.read("d_img", w.d_img);
    r.read("identity_count", w.identity_count);
    r.read("motions_per_identity", w.motions_per_identity);
    r.read("mixing_depth", w.mixing_depth);
    r.read("render_width", w.render_width);
    r.read("render_gain", w.render_gain);
    r.reject_unknown();
  }

  if (root.has("model")) {
    auto r = root.child("model");
    auto& m = c.model;
    detail::read_array(r, "scale_sides", m.scale_sides);
    detail::read_array(r, "scale_channels", m.scale_channels);
    r.read("d_top", m.d_top);
    r.read("d_z", m.d_z);
    r.read("d_model", m.d_model);
    r.read("query_tokens", m.query_tokens);
    r.read("extractor_blocks", m.extractor_blocks);
    r.read("slots", m.slots);
    r.read("d_c", m.d_c);
    r.read("heads", m.heads);
    r.read("generator_width", m.generator_width);
    r.read("discriminator_width", m.discriminator_width);
    r.read("xi", m.xi);
    r.read("encoder_gain", m.encoder_gain);
    r.read("address_temperature", m.address_temperature);
    r.reject_unknown();
  }

  if (!root.has("train")) throw ConfigError("train.steps", "required field is missing");
  {
    auto r = root.child("train");
    auto& t = c.train;
    r.read("steps", t.steps, true);
    r.read("batch_size", t.batch_size);
    r.read("lr", t.optimizer.learning_rate);
    r.read("beta1", t.optimizer.beta1);
    r.read("beta2", t.optimizer.beta2);
    r.read("eps", t.optimizer.epsilon);
    r.read("train_uses_recall", t.train_uses_recall);
    r.read("heldout_every", t.heldout_every);
    r.read("heldout_pairs", t.heldout_pairs);
    if (r.has("weights")) {
      auto wr = r.child("weights");
      wr.read("rec", t.weights.rec);
      wr.read("adv", t.weights.adv);
      wr.read("dis", t.weights.dis);
      wr.read("dmem", t.weights.dmem);
      wr.read("align", t.weights.align);
      wr.reject_unknown();
    }
    if (r.has("flags")) {
      auto fr = r.child("flags");
      fr.read("emi_on", t.flags.emi_on);
      fr.read("edi_on", t.flags.edi_on);
      fr.read("ldis_on", t.flags.ldis_on);
      fr.reject_unknown();
    }
    r.reject_unknown();
  }
  root.reject_unknown();
  validate(c);
  return c;
}

/// Complete snapshot; parse_config(to_json(c)) reproduces `c`.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  const auto& w = c.world;
  j["world"] = {{"seed", w.seed},
                {"d_id", w.d_id},
                {"d_mo", w.d_mo},
                {"d_img", w.d_img},
                {"identity_count", w.identity_count},
                {"motions_per_identity", w.motions_per_identity},
                {"mixing_depth", w.mixing_depth},
                {"render_width", w.render_width},
                {"render_gain", w.render_gain}};
  const auto& m = c.model;
  j["model"] = {{"scale_sides", m.scale_sides},
                {"scale_channels", m.scale_channels},
                {"d_top", m.d_top},
                {"d_z", m.d_z},
                {"d_model", m.d_model},
                {"query_tokens", m.query_tokens},
                {"extractor_blocks", m.extractor_blocks},
                {"slots", m.slots},
                {"d_c", m.d_c},
                {"heads", m.heads},
                {"generator_width", m.generator_width},
                {"discriminator_width", m.discriminator_width},
                {"xi", m.xi},
                {"encoder_gain", m.encoder_gain},
                {"address_temperature", m.address_temperature}};
  const auto& t = c.train;
  j["train"] = {{"steps", t.steps},
                {"batch_size", t.batch_size},
                {"lr", t.optimizer.learning_rate},
                {"beta1", t.optimizer.beta1},
                {"beta2", t.optimizer.beta2},
                {"eps", t.optimizer.epsilon},
                {"train_uses_recall", t.train_uses_recall},
                {"heldout_every", t.heldout_every},
                {"heldout_pairs", t.heldout_pairs},
                {"weights",
                 {{"rec", t.weights.rec},
                  {"adv", t.weights.adv},
                  {"dis", t.weights.dis},
                  {"dmem", t.weights.dmem},
                  {"align", t.weights.align}}},
                {"flags", {{"emi_on", t.flags.emi_on}, {"edi_on", t.flags.edi_on}, {"ldis_on", t.flags.ldis_on}}}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON in ") + path + ": " + e.what());
  }
  return parse_config(doc);
}

/// LEAKMEM_SEED, when set, replaces the configured seed.
inline void apply_seed_override(RunConfig& c, const char* env_value) {
  if (!env_value || !*env_value) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env_value, &end, 10);
  if (*end != '\0' || env_value[0] == '-') throw ConfigError("LEAKMEM_SEED", "expected a non-negative integer");
  c.seed = v;
}

}  // namespace leakmem
