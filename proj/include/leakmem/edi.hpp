#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "leakmem/emi.hpp"

namespace leakmem {

/// Compressed detail token f_pi, shape [d_c].
template <class Real>
struct CompressedToken {
  Tensor<Real> value;
};

/// Softmax slot address, shape [S], on the probability simplex.
template <class Real>
struct AddressWeights {
  Tensor<Real> omega;
};

struct DetailConfig {
  std::size_t channels = 32;  // c_4
  std::size_t side = 3;       // s_4
  std::size_t d_c = 32;
  std::size_t d_z = 16;
  std::size_t slots = 64;  // S
  std::size_t d_attn = 32;
  std::size_t heads = 4;  // H
};

/// Feature compressor: spatial average pooling, then each of the d_c outputs
/// is a softmax-weighted mix of the pooled channels.
template <class Real>
class Compressor {
 public:
  Compressor() = default;
  Compressor(ParameterSet<Real>& params, Rng& rng, const DetailConfig& cfg) : channels_(cfg.channels) {
    // Each output starts focused on one channel; off-diagonal weights are small.
    auto logits = normal_tensor<Real>(rng, {cfg.d_c, cfg.channels}, 0.1);
    auto v = logits.mutable_data();
    for (std::size_t j = 0; j < cfg.d_c; ++j) v[j * cfg.channels + j % cfg.channels] += Real(5);
    logits_ = params.add("edi.pi.logits", logits);
  }

  Tensor<Real>& logits() { return logits_; }

  CompressedToken<Real> operator()(const Tensor<Real>& f4) const {
    if (f4.rank() != 3 || f4.dim(0) != channels_) {
      throw DimensionError("compress: expected [" + std::to_string(channels_) + " x s x s], got " +
                           shape_string(f4.shape()));
    }
    auto pooled = reshape(avg_pool_spatial(f4), {channels_, 1});
    auto mix = softmax_rows(logits_);
    return {reshape(matmul(mix, pooled), {logits_.dim(0)})};
  }

 private:
  std::size_t channels_ = 0;
  Tensor<Real> logits_;
};

/// Token -> [c x s x s]: linear map to channels, broadcast over positions,
/// plus learned positional embeddings.
template <class Real>
class Decompressor {
 public:
  Decompressor() = default;
  Decompressor(ParameterSet<Real>& params, Rng& rng, const DetailConfig& cfg) : side_(cfg.side) {
    weight_ = params.add("edi.lambda.W", dense_init<Real>(rng, cfg.d_c, cfg.channels));
    bias_ = params.add("edi.lambda.b", Tensor<Real>::zeros({cfg.channels}));
    positions_ = params.add("edi.lambda.pos", normal_tensor<Real>(rng, {cfg.side * cfg.side, cfg.channels}, 0.1));
  }

  Tensor<Real>& weight() { return weight_; }
  Tensor<Real>& bias() { return bias_; }
  Tensor<Real>& positions() { return positions_; }

  Tensor<Real> operator()(const CompressedToken<Real>& token, const Shape& target) const {
    const Shape expect{weight_.dim(1), side_, side_};
    if (target != expect) {
      throw DimensionError("decompress: target " + shape_string(target) + " does not match configured " +
                           shape_string(expect));
    }
    auto channel = affine(token.value, weight_, &bias_);
    auto tokens = add(broadcast_rows(channel, side_ * side_), positions_);
    return tokens_to_grid(tokens, side_);
  }

 private:
  std::size_t side_ = 0;
  Tensor<Real> weight_, bias_, positions_;
};

/// Driven-identity memory M_d [S x d_c] and motion-source memory
/// M_ms [S x (d_c + d_z)]; row i of one corresponds to row i of the other.
template <class Real>
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(ParameterSet<Real>& params, Rng& rng, const DetailConfig& cfg) {
    driven_ = params.add("edi.M_d", unit_rows<Real>(rng, cfg.slots, cfg.d_c));
    motion_source_ = params.add("edi.M_ms", unit_rows<Real>(rng, cfg.slots, cfg.d_c + cfg.d_z));
  }

  const Tensor<Real>& driven() const { return driven_; }
  const Tensor<Real>& motion_source() const { return motion_source_; }
  Tensor<Real>& driven() { return driven_; }
  Tensor<Real>& motion_source() { return motion_source_; }
  std::size_t slots() const { return driven_.dim(0); }

  /// Re-draws any slot whose norm fell below `min_norm`. Returns the
  /// re-initialized (bank, slot) pairs; bank 0 is M_d, 1 is M_ms.
  std::vector<std::pair<int, std::size_t>> guard_underflow(Rng& rng, double min_norm = 1e-6) {
    std::vector<std::pair<int, std::size_t>> events;
    int bank = 0;
    for (auto* t : {&driven_, &motion_source_}) {
      const std::size_t rows = t->dim(0), cols = t->dim(1);
      auto v = t->mutable_data();
      for (std::size_t i = 0; i < rows; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < cols; ++j) s += double(v[i * cols + j]) * v[i * cols + j];
        if (std::sqrt(s) < min_norm) {
          auto fresh = unit_rows<Real>(rng, 1, cols);
          for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] = fresh[j];
          events.emplace_back(bank, i);
        }
      }
      ++bank;
    }
    return events;
  }

 private:
  Tensor<Real> driven_, motion_source_;
};

/// Omega_d = softmax_i cos(f_d_pi, m_d^i).
template <class Real>
AddressWeights<Real> address_driven(const CompressedToken<Real>& f_d_pi, const Tensor<Real>& m_d,
                                    double temperature = 1.0) {
  return {softmax(cosine_similarity_rows(f_d_pi.value, m_d), Real(temperature))};
}

/// Omega_ms = softmax_i cos(f_s_pi (+) z_ds, m_ms^i).
template <class Real>
AddressWeights<Real> address_motion_source(const CompressedToken<Real>& f_s_pi, const Tensor<Real>& z_ds,
                                           const Tensor<Real>& m_ms, double temperature = 1.0) {
  return {softmax(cosine_similarity_rows(concat<Real>({f_s_pi.value, z_ds}), m_ms), Real(temperature))};
}

/// sum_i omega_i * m_d^i.
template <class Real>
CompressedToken<Real> recall(const AddressWeights<Real>& address, const Tensor<Real>& m_d) {
  const auto& w = address.omega;
  if (m_d.rank() != 2 || w.size() != m_d.dim(0)) {
    throw DimensionError("recall: address " + shape_string(w.shape()) + " vs memory " + shape_string(m_d.shape()));
  }
  Real s = 0;
  for (Real x : w.data()) {
    if (x < Real(-1e-5)) throw ContractError("recall: negative address weight");
    s += x;
  }
  if (std::abs(s - Real(1)) > std::max<Real>(Real(1e-5), detail::simplex_tolerance<Real>(w.size()))) {
    throw ContractError("recall: address weights sum to " + std::to_string(s));
  }
  return {reshape(matmul(reshape(w, {1, w.size()}), m_d), {m_d.dim(1)})};
}

/// || f_d_pi - recalled ||_2.
template <class Real>
Tensor<Real> memory_loss(const CompressedToken<Real>& f_d_pi, const CompressedToken<Real>& recalled) {
  return l2_norm(sub(f_d_pi.value, recalled.value));
}

/// KL(Omega_ms || Omega_d) with Omega_d treated as a fixed target.
template <class Real>
Tensor<Real> alignment_loss(const AddressWeights<Real>& omega_ms, const AddressWeights<Real>& omega_d) {
  return kl_divergence(omega_ms.omega, stop_gradient(omega_d.omega));
}

/// Multi-head cross-attention fusion: queries from the source grid, keys and
/// values from the recalled grid, residual on the source grid.
template <class Real>
class CrossAttentionFusion {
 public:
  CrossAttentionFusion() = default;
  CrossAttentionFusion(ParameterSet<Real>& params, Rng& rng, const DetailConfig& cfg)
      : heads_(cfg.heads), d_attn_(cfg.d_attn) {
    if (cfg.heads == 0 || cfg.d_attn % cfg.heads != 0) {
      throw ContractError("mhca: head count " + std::to_string(cfg.heads) + " must divide d_attn " +
                          std::to_string(cfg.d_attn));
    }
    wq_ = params.add("edi.mhca.Wq", dense_init<Real>(rng, cfg.channels, cfg.d_attn));
    wk_ = params.add("edi.mhca.Wk", dense_init<Real>(rng, cfg.channels, cfg.d_attn));
    wv_ = params.add("edi.mhca.Wv", dense_init<Real>(rng, cfg.channels, cfg.d_attn));
    bv_ = params.add("edi.mhca.bv", Tensor<Real>::zeros({cfg.d_attn}));
    wo_ = params.add("edi.mhca.Wo", dense_init<Real>(rng, cfg.d_attn, cfg.channels, 0.5));
  }

  std::size_t heads() const { return heads_; }
  Tensor<Real>& wq() { return wq_; }
  Tensor<Real>& wk() { return wk_; }
  Tensor<Real>& wv() { return wv_; }
  Tensor<Real>& bv() { return bv_; }
  Tensor<Real>& wo() { return wo_; }

  Tensor<Real> operator()(const Tensor<Real>& f_s4, const Tensor<Real>& f_hat_s4,
                          std::vector<Tensor<Real>>* attention = nullptr) const {
    detail::require_same_shape("mhca_fuse", f_s4.shape(), f_hat_s4.shape());
    const std::size_t side = f_s4.dim(1);
    auto src = grid_to_tokens(f_s4);
    auto rec = grid_to_tokens(f_hat_s4);
    auto q = matmul(src, wq_);
    auto k = matmul(rec, wk_);
    auto v = add_row_broadcast(matmul(rec, wv_), bv_);
    const std::size_t dh = d_attn_ / heads_;
    const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
    std::vector<Tensor<Real>> per_head;
    for (std::size_t h = 0; h < heads_; ++h) {
      auto qh = heads_ == 1 ? q : slice_cols(q, h * dh, dh);
      auto kh = heads_ == 1 ? k : slice_cols(k, h * dh, dh);
      auto vh = heads_ == 1 ? v : slice_cols(v, h * dh, dh);
      auto attn = softmax_rows(matmul(qh, transpose(kh)), inv_sqrt);
      if (attention) attention->push_back(attn);
      per_head.push_back(matmul(attn, vh));
    }
    auto mixed = heads_ == 1 ? per_head[0] : concat_cols(per_head);
    return tokens_to_grid(add(src, matmul(mixed, wo_)), side);
  }

 private:
  std::size_t heads_ = 1, d_attn_ = 0;
  Tensor<Real> wq_, wk_, wv_, bv_, wo_;
};

/// The full enhanced detail indicator (compressor, decompressor, banks, fusion).
template <class Real>
class DetailIndicator {
 public:
  DetailIndicator() = default;
  DetailIndicator(ParameterSet<Real>& params, Rng& rng, DetailConfig cfg)
      : cfg_(cfg),
        compress(params, rng, cfg),
        decompress(params, rng, cfg),
        memory(params, rng, cfg),
        fuse(params, rng, cfg) {}

  const DetailConfig& config() const { return cfg_; }

 private:
  DetailConfig cfg_;

 public:
  Compressor<Real> compress;
  Decompressor<Real> decompress;
  MemoryBank<Real> memory;
  CrossAttentionFusion<Real> fuse;
};

}  // namespace leakmem
