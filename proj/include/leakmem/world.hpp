#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "leakmem/errors.hpp"

namespace leakmem {

struct WorldConfig {
  std::uint64_t seed = 0;
  std::size_t d_id = 8;
  std::size_t d_mo = 4;
  std::size_t d_img = 64;
  std::size_t identity_count = 32;
  // 0: motions are drawn continuously. Otherwise each identity owns a fixed
  // clip of this many motion latents and frames are drawn from it.
  std::size_t motions_per_identity = 0;
  std::size_t mixing_depth = 2;
  std::size_t render_width = 64;
  double render_gain = 1.0;
};

struct SyntheticSample {
  std::size_t identity = 0;
  std::vector<double> identity_latent;
  std::vector<double> motion_latent;
  std::vector<double> observation;
};

struct SamplePair {
  SyntheticSample source;
  SyntheticSample driven;
};

/// Procedural identity x motion world with a frozen nonlinear renderer.
///
/// Identities are unit vectors, motions live in [-1, 1]^d_mo, and an
/// observation is `render(a, m)`: `mixing_depth - 1` tanh layers followed by a
/// linear read-out, all drawn once from the seed.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(WorldConfig cfg) : cfg_(cfg) {
    if (cfg_.d_id == 0 || cfg_.d_mo == 0 || cfg_.d_img == 0 || cfg_.identity_count < 2 || cfg_.mixing_depth < 1 ||
        cfg_.render_width == 0) {
      throw ContractError("world config: dimensions must be positive and identity_count >= 2");
    }
    std::mt19937_64 rng(cfg_.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> nd(0.0, 1.0);

    std::size_t fan_in = cfg_.d_id + cfg_.d_mo;
    for (std::size_t l = 0; l < cfg_.mixing_depth; ++l) {
      const bool last = l + 1 == cfg_.mixing_depth;
      const std::size_t fan_out = last ? cfg_.d_img : cfg_.render_width;
      Layer layer{fan_in, fan_out, std::vector<double>(fan_in * fan_out), std::vector<double>(fan_out)};
      const double sd = (last ? 1.0 : cfg_.render_gain) / std::sqrt(double(fan_in));
      for (auto& w : layer.weight) w = sd * nd(rng);
      for (auto& b : layer.bias) b = last ? 0.0 : 0.1 * nd(rng);
      layers_.push_back(std::move(layer));
      fan_in = fan_out;
    }

    identities_.resize(cfg_.identity_count);
    for (auto& a : identities_) {
      a.resize(cfg_.d_id);
      double s = 0;
      for (auto& x : a) {
        x = nd(rng);
        s += x * x;
      }
      for (auto& x : a) x /= std::sqrt(s);
    }

    if (cfg_.motions_per_identity > 0) {
      if (cfg_.motions_per_identity < 2) throw ContractError("world config: motions_per_identity must be 0 or >= 2");
      std::uniform_real_distribution<double> ud(-1.0, 1.0);
      clips_.resize(cfg_.identity_count);
      for (auto& clip : clips_) {
        clip.resize(cfg_.motions_per_identity);
        for (auto& m : clip) {
          m.resize(cfg_.d_mo);
          for (auto& x : m) x = ud(rng);
        }
      }
    }
  }

  const WorldConfig& config() const { return cfg_; }
  std::size_t identity_count() const { return identities_.size(); }
  const std::vector<double>& identity_latent(std::size_t id) const { return identities_.at(id); }

  std::vector<double> render(const std::vector<double>& a, const std::vector<double>& m) const {
    if (a.size() != cfg_.d_id || m.size() != cfg_.d_mo) {
      throw DimensionError("render: expected identity[" + std::to_string(cfg_.d_id) + "] and motion[" +
                           std::to_string(cfg_.d_mo) + "], got [" + std::to_string(a.size()) + "] and [" +
                           std::to_string(m.size()) + "]");
    }
    std::vector<double> x(a);
    x.insert(x.end(), m.begin(), m.end());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      std::vector<double> y(L.bias);
      for (std::size_t i = 0; i < L.fan_in; ++i) {
        for (std::size_t j = 0; j < L.fan_out; ++j) y[j] += x[i] * L.weight[i * L.fan_out + j];
      }
      if (l + 1 < layers_.size()) {
        for (auto& v : y) v = std::tanh(v);
      }
      x = std::move(y);
    }
    return x;
  }

  SyntheticSample make_sample(std::size_t id, std::vector<double> motion) const {
    SyntheticSample s;
    s.identity = id;
    s.identity_latent = identity_latent(id);
    s.motion_latent = std::move(motion);
    s.observation = render(s.identity_latent, s.motion_latent);
    return s;
  }

  template <class Urbg>
  std::vector<double> draw_motion(Urbg& rng) const {
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    std::vector<double> m(cfg_.d_mo);
    for (auto& x : m) x = ud(rng);
    return m;
  }

  template <class Urbg>
  SyntheticSample sample(std::size_t id, Urbg& rng) const {
    check_identity(id);
    if (!clips_.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, clips_[id].size() - 1);
      return make_sample(id, clips_[id][pick(rng)]);
    }
    return make_sample(id, draw_motion(rng));
  }

  /// Same identity, different motions (self-supervised training pair).
  template <class Urbg>
  SamplePair sample_pair(std::size_t id, Urbg& rng) const {
    check_identity(id);
    if (!clips_.empty()) {
      const auto& clip = clips_[id];
      std::uniform_int_distribution<std::size_t> pick(0, clip.size() - 1);
      const std::size_t i = pick(rng);
      std::size_t j = pick(rng);
      while (j == i) j = pick(rng);
      return {make_sample(id, clip[i]), make_sample(id, clip[j])};
    }
    auto src = make_sample(id, draw_motion(rng));
    auto drv = make_sample(id, draw_motion(rng));
    return {std::move(src), std::move(drv)};
  }

  /// Distinct identities, independent motions.
  template <class Urbg>
  SamplePair sample_cross_pair(std::size_t id_source, std::size_t id_driven, Urbg& rng) const {
    if (id_source == id_driven) throw ContractError("sample_cross_pair: identities must differ");
    auto src = sample(id_source, rng);
    auto drv = sample(id_driven, rng);
    return {std::move(src), std::move(drv)};
  }

  template <class Urbg>
  std::size_t draw_identity(Urbg& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, identities_.size() - 1);
    return pick(rng);
  }

  template <class Urbg>
  std::pair<std::size_t, std::size_t> draw_distinct_identities(Urbg& rng) const {
    const std::size_t a = draw_identity(rng);
    std::uniform_int_distribution<std::size_t> pick(0, identities_.size() - 2);
    std::size_t b = pick(rng);
    if (b >= a) ++b;
    return {a, b};
  }

 private:
  struct Layer {
    std::size_t fan_in, fan_out;
    std::vector<double> weight;  // [fan_in x fan_out]
    std::vector<double> bias;
  };

  void check_identity(std::size_t id) const {
    if (id >= identities_.size()) {
      throw ContractError("identity " + std::to_string(id) + " out of range (" + std::to_string(identities_.size()) +
                          " identities)");
    }
  }

  WorldConfig cfg_;
  std::vector<Layer> layers_;
  std::vector<std::vector<double>> identities_;
  std::vector<std::vector<std::vector<double>>> clips_;
};

}  // namespace leakmem
