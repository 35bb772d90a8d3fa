#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "leakmem/params.hpp"

namespace leakmem {

inline constexpr std::size_t kScaleCount = 5;
// Zero-based slot of the scale that carries the extractor (the 4th scale).
inline constexpr std::size_t kQueryScale = 3;

/// Per-scale feature grids f_1..f_5 ([c_k x s_k x s_k]) plus the top code.
template <class Real>
struct MultiScaleFeatures {
  std::array<Tensor<Real>, kScaleCount> grids;
  Tensor<Real> top;

  void validate() const {
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      const auto& g = grids[k];
      if (!g.defined() || g.rank() != 3 || g.dim(1) != g.dim(2)) {
        throw DimensionError("scale " + std::to_string(k + 1) + " must be a square [c x s x s] grid");
      }
      if (k > 0 && g.dim(1) >= grids[k - 1].dim(1)) {
        throw DimensionError("spatial sizes must strictly decrease across scales");
      }
    }
  }
};

template <class Real>
struct MotionEmbedding {
  Tensor<Real> z;
};

/// [c x s x s] grid -> [s*s x c] token matrix (one row per position).
template <class Real>
Tensor<Real> grid_to_tokens(const Tensor<Real>& grid) {
  detail::require_rank("grid_to_tokens", grid.shape(), 3);
  const std::size_t c = grid.dim(0), area = grid.dim(1) * grid.dim(2);
  return transpose(reshape(grid, {c, area}));
}

/// Inverse of grid_to_tokens.
template <class Real>
Tensor<Real> tokens_to_grid(const Tensor<Real>& tokens, std::size_t side) {
  detail::require_rank("tokens_to_grid", tokens.shape(), 2);
  if (tokens.dim(0) != side * side) {
    throw DimensionError("tokens_to_grid: " + shape_string(tokens.shape()) + " is not " + std::to_string(side) + "x" +
                         std::to_string(side) + " positions");
  }
  return reshape(transpose(tokens), {tokens.dim(1), side, side});
}

struct ExtractorConfig {
  std::size_t in_channels = 32;  // c_4
  std::size_t d_model = 32;
  std::size_t query_tokens = 8;  // M
  std::size_t blocks = 2;        // N
  std::size_t ffn_width = 64;
};

/// Learnable-query cross-attention extractor over the scale-4 tokens.
///
/// Each block: X += softmax(X Wq (T Wk)^T / sqrt(d)) (T Wv) Wo, then
/// X += tanh(X W1 + b1) W2 + b2. No positional encoding is applied to T, so
/// the result is invariant to token order.
template <class Real>
class QueryExtractor {
 public:
  struct Block {
    Tensor<Real> wq, wk, wv, wo, w1, b1, w2, b2;
  };

  QueryExtractor() = default;

  QueryExtractor(ParameterSet<Real>& params, Rng& rng, ExtractorConfig cfg, const std::string& prefix = "emi")
      : cfg_(cfg) {
    const std::size_t d = cfg.d_model;
    queries_ = params.add(prefix + ".q_l", normal_tensor<Real>(rng, {cfg.query_tokens, d}, 1.0));
    in_w_ = params.add(prefix + ".in.W", dense_init<Real>(rng, cfg.in_channels, d));
    in_b_ = params.add(prefix + ".in.b", Tensor<Real>::zeros({d}));
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      const std::string b = prefix + ".block" + std::to_string(i) + ".";
      Block blk;
      blk.wq = params.add(b + "Wq", dense_init<Real>(rng, d, d));
      blk.wk = params.add(b + "Wk", dense_init<Real>(rng, d, d));
      blk.wv = params.add(b + "Wv", dense_init<Real>(rng, d, d));
      blk.wo = params.add(b + "Wo", dense_init<Real>(rng, d, d, 0.5));
      blk.w1 = params.add(b + "ffn1.W", dense_init<Real>(rng, d, cfg.ffn_width));
      blk.b1 = params.add(b + "ffn1.b", Tensor<Real>::zeros({cfg.ffn_width}));
      blk.w2 = params.add(b + "ffn2.W", dense_init<Real>(rng, cfg.ffn_width, d, 0.5));
      blk.b2 = params.add(b + "ffn2.b", Tensor<Real>::zeros({d}));
      blocks_.push_back(std::move(blk));
    }
  }

  const ExtractorConfig& config() const { return cfg_; }
  const Tensor<Real>& queries() const { return queries_; }
  Tensor<Real>& queries() { return queries_; }
  std::vector<Block>& blocks() { return blocks_; }

  /// f4[c x s x s] -> [d_model]. When `attention` is given, the per-block
  /// attention matrices ([M x s*s]) are appended to it.
  Tensor<Real> extract(const Tensor<Real>& f4, std::vector<Tensor<Real>>* attention = nullptr) const {
    if (f4.rank() != 3 || f4.dim(0) != cfg_.in_channels) {
      throw DimensionError("extract_p: expected [" + std::to_string(cfg_.in_channels) + " x s x s], got " +
                           shape_string(f4.shape()));
    }
    const Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(cfg_.d_model));
    auto tokens = affine_rows(grid_to_tokens(f4), in_w_, &in_b_);
    Tensor<Real> x = queries_;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& blk = blocks_[i];
      auto q = matmul(x, blk.wq);
      auto k = matmul(tokens, blk.wk);
      auto v = matmul(tokens, blk.wv);
      auto attn = softmax_rows(matmul(q, transpose(k)), inv_sqrt_d);
      if (attention) attention->push_back(attn);
      x = add(x, matmul(matmul(attn, v), blk.wo));
      auto hidden = tanh(affine_rows(x, blk.w1, &blk.b1));
      x = add(x, affine_rows(hidden, blk.w2, &blk.b2));
      for (Real val : x.data()) {
        if (!std::isfinite(val)) throw NumericError("extract_p: non-finite activation in block " + std::to_string(i));
      }
    }
    return mean_rows(x);
  }

 private:
  ExtractorConfig cfg_;
  Tensor<Real> queries_, in_w_, in_b_;
  std::vector<Block> blocks_;
};

template <class Real>
Tensor<Real> extract_p(const Tensor<Real>& f4, const QueryExtractor<Real>& p) {
  return p.extract(f4);
}

struct MotionConfig {
  std::array<std::size_t, kScaleCount> channels{};
  std::size_t d_z = 16;
  ExtractorConfig extractor;
};

/// Enhanced motion indicator: extractor on f_4, average pooling on the other
/// scales, bias-free projections to d_z, softmax-weighted fusion.
template <class Real>
class MotionIndicator {
 public:
  MotionIndicator() = default;

  MotionIndicator(ParameterSet<Real>& params, Rng& rng, MotionConfig cfg) : cfg_(cfg) {
    extractor_ = QueryExtractor<Real>(params, rng, cfg.extractor, "emi");
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      const std::size_t in = k == kQueryScale ? cfg.extractor.d_model : cfg.channels[k];
      projections_[k] = params.add("emi.proj" + std::to_string(k + 1), dense_init<Real>(rng, in, cfg.d_z));
    }
    fusion_logits_ = params.add("emi.fusion_logits", Tensor<Real>::zeros({kScaleCount}));
  }

  const MotionConfig& config() const { return cfg_; }
  QueryExtractor<Real>& extractor() { return extractor_; }
  const QueryExtractor<Real>& extractor() const { return extractor_; }
  const std::array<Tensor<Real>, kScaleCount>& projections() const { return projections_; }
  Tensor<Real>& fusion_logits() { return fusion_logits_; }

  /// Per-scale contributions before fusion, each [d_z].
  std::array<Tensor<Real>, kScaleCount> contributions(const MultiScaleFeatures<Real>& f) const {
    std::array<Tensor<Real>, kScaleCount> out;
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      auto pooled = k == kQueryScale ? extractor_.extract(f.grids[k]) : avg_pool_spatial(f.grids[k]);
      out[k] = affine(pooled, projections_[k]);
    }
    return out;
  }

  MotionEmbedding<Real> fuse(const MultiScaleFeatures<Real>& f) const {
    auto parts = contributions(f);
    return {weighted_sum(std::vector<Tensor<Real>>(parts.begin(), parts.end()), fusion_logits_)};
  }

 private:
  MotionConfig cfg_;
  QueryExtractor<Real> extractor_;
  std::array<Tensor<Real>, kScaleCount> projections_;
  Tensor<Real> fusion_logits_;
};

template <class Real>
MotionEmbedding<Real> fuse_motion(const MultiScaleFeatures<Real>& features, const MotionIndicator<Real>& emi) {
  return emi.fuse(features);
}

/// max(0, cos(z_s, z_d) - xi).
template <class Real>
Tensor<Real> disentanglement_loss(const MotionEmbedding<Real>& z_s, const MotionEmbedding<Real>& z_d, Real xi) {
  return relu(add_scalar(cosine_similarity(z_s.z, z_d.z), -xi));
}

/// z_d - z_s.
template <class Real>
Tensor<Real> motion_difference(const MotionEmbedding<Real>& z_d, const MotionEmbedding<Real>& z_s) {
  return sub(z_d.z, z_s.z);
}

}  // namespace leakmem
