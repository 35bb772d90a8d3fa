#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "leakmem/ops.hpp"

namespace leakmem {

/// Ordered registry of named trainable tensors. Registration order is the
/// serialization order, so it must not depend on anything but the config.
template <class Real>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<Real> tensor;
  };

  Tensor<Real> add(std::string name, Tensor<Real> t) {
    for (const auto& e : entries_) {
      if (e.name == name) throw ContractError("duplicate parameter name: " + name);
    }
    t.set_requires_grad(true);
    entries_.push_back({std::move(name), t});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  const Tensor<Real>* find(std::string_view name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e.tensor;
    }
    return nullptr;
  }

  Tensor<Real> get(std::string_view name) const {
    if (auto* t = find(name)) return *t;
    throw ContractError("unknown parameter: " + std::string(name));
  }

  std::size_t scalar_count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.name.compare(0, prefix.size(), prefix) == 0) n += e.tensor.size();
    }
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
};

using Rng = std::mt19937_64;

template <class Real>
Tensor<Real> normal_tensor(Rng& rng, Shape shape, double stddev) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<Real> v(shape_size(shape));
  for (auto& x : v) x = static_cast<Real>(nd(rng));
  return Tensor<Real>(std::move(shape), std::move(v));
}

// Glorot-style scale for a [fan_in x fan_out] matrix.
template <class Real>
Tensor<Real> dense_init(Rng& rng, std::size_t fan_in, std::size_t fan_out, double gain = 1.0) {
  return normal_tensor<Real>(rng, {fan_in, fan_out}, gain / std::sqrt(static_cast<double>(fan_in)));
}

/// Rows drawn i.i.d. Gaussian then scaled to unit norm.
template <class Real>
Tensor<Real> unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  auto t = normal_tensor<Real>(rng, {rows, cols}, 1.0);
  auto v = t.mutable_data();
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += double(v[i * cols + j]) * v[i * cols + j];
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] = static_cast<Real>(v[i * cols + j] * inv);
  }
  return t;
}

/// x[rows x in] * W[in x out] (+ b[out]).
template <class Real>
Tensor<Real> affine_rows(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>* b = nullptr) {
  auto y = matmul(x, w);
  return b ? add_row_broadcast(y, *b) : y;
}

/// Vector form of affine_rows: x[in] -> [out].
template <class Real>
Tensor<Real> affine(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>* b = nullptr) {
  auto y = affine_rows(reshape(x, {1, x.size()}), w, b);
  return reshape(y, {w.dim(1)});
}

struct AdaptiveConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam-family update. With beta1 == 0 it is momentum-free (bias-corrected
/// RMS scaling of the raw gradient).
template <class Real>
class AdaptiveOptimizer {
 public:
  AdaptiveOptimizer(ParameterSet<Real>& params, AdaptiveConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& e : params.entries()) {
      first_.emplace_back(e.tensor.size(), 0.0);
      second_.emplace_back(e.tensor.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = cfg_.beta1 > 0 ? 1.0 - std::pow(cfg_.beta1, double(t_)) : 1.0;
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    auto& entries = params_->entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      auto& t = entries[p].tensor;
      if (!t.has_grad()) continue;
      auto g = t.grad();
      auto v = t.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = g[i];
        first_[p][i] = cfg_.beta1 * first_[p][i] + (1.0 - cfg_.beta1) * gi;
        second_[p][i] = cfg_.beta2 * second_[p][i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = first_[p][i] / c1;
        const double vhat = second_[p][i] / c2;
        v[i] = static_cast<Real>(v[i] - cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon));
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  ParameterSet<Real>* params_;
  AdaptiveConfig cfg_;
  std::vector<std::vector<double>> first_, second_;
  std::uint64_t t_ = 0;
};

}  // namespace leakmem
