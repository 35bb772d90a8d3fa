#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "leakmem/edi.hpp"
#include "leakmem/emi.hpp"
#include "leakmem/params.hpp"
#include "leakmem/world.hpp"

namespace leakmem {

struct ModelConfig {
  std::array<std::size_t, kScaleCount> scale_sides{6, 5, 4, 3, 1};
  std::array<std::size_t, kScaleCount> scale_channels{2, 2, 4, 32, 8};
  std::size_t d_top = 32;
  std::size_t d_z = 16;
  std::size_t d_model = 32;
  std::size_t query_tokens = 8;
  std::size_t extractor_blocks = 2;
  std::size_t slots = 64;
  std::size_t d_c = 32;
  std::size_t heads = 4;
  std::size_t generator_width = 128;
  std::size_t discriminator_width = 32;
  double xi = 0.1;
  double encoder_gain = 2.0;
  double address_temperature = 1.0;
};

struct AblationFlags {
  bool emi_on = true;
  bool edi_on = true;
  bool ldis_on = true;
};

struct LossWeights {
  double rec = 1.0;
  double adv = 0.1;
  double dis = 1.0;
  double dmem = 1.0;
  double align = 1.0;
};

struct TrainConfig {
  LossWeights weights;
  AdaptiveConfig optimizer;
  std::size_t steps = 5000;
  std::size_t batch_size = 8;
  AblationFlags flags;
  bool train_uses_recall = true;
  // Held-out alignment KL is measured every `heldout_every` steps on
  // `heldout_pairs` fixed pairs (EDI runs only; 0 disables).
  std::size_t heldout_every = 10;
  std::size_t heldout_pairs = 64;
};

/// Probabilities fed to log() are clamped to [eps, 1 - eps].
inline constexpr double kProbabilityClamp = 1e-7;

template <class Real>
Tensor<Real> to_tensor(const std::vector<double>& v) {
  std::vector<Real> r(v.begin(), v.end());
  return Tensor<Real>::vector(std::move(r));
}

/// E: one tanh(linear) branch per scale plus a top code.
template <class Real>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterSet<Real>& params, Rng& rng, const ModelConfig& cfg, std::size_t d_img) : cfg_(cfg) {
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      const std::size_t out = cfg.scale_channels[k] * cfg.scale_sides[k] * cfg.scale_sides[k];
      const std::string p = "enc.scale" + std::to_string(k + 1) + ".";
      weights_[k] = params.add(p + "W", dense_init<Real>(rng, d_img, out, cfg.encoder_gain));
      biases_[k] = params.add(p + "b", Tensor<Real>::zeros({out}));
    }
    top_w_ = params.add("enc.top.W", dense_init<Real>(rng, d_img, cfg.d_top, cfg.encoder_gain));
    top_b_ = params.add("enc.top.b", Tensor<Real>::zeros({cfg.d_top}));
  }

  MultiScaleFeatures<Real> operator()(const Tensor<Real>& image) const {
    if (image.size() != top_w_.dim(0)) {
      throw DimensionError("encode: observation " + shape_string(image.shape()) + " vs expected [" +
                           std::to_string(top_w_.dim(0)) + "]");
    }
    MultiScaleFeatures<Real> f;
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      const std::size_t s = cfg_.scale_sides[k];
      f.grids[k] = reshape(tanh(affine(image, weights_[k], &biases_[k])), {cfg_.scale_channels[k], s, s});
    }
    f.top = tanh(affine(image, top_w_, &top_b_));
    return f;
  }

 private:
  ModelConfig cfg_;
  std::array<Tensor<Real>, kScaleCount> weights_, biases_;
  Tensor<Real> top_w_, top_b_;
};

/// G(f_s + lift(z_d), skips) -> observation.
template <class Real>
class Generator {
 public:
  Generator() = default;
  Generator(ParameterSet<Real>& params, Rng& rng, const ModelConfig& cfg, std::size_t d_img) {
    const std::size_t w = cfg.generator_width;
    std::size_t fan_in = cfg.d_top;
    for (std::size_t k = 0; k < kScaleCount; ++k) fan_in += cfg.scale_channels[k] * cfg.scale_sides[k] * cfg.scale_sides[k];
    const double gain = std::sqrt(double(cfg.d_top) / double(fan_in));
    lift_ = params.add("gen.lift.W", dense_init<Real>(rng, cfg.d_z, cfg.d_top));
    top_ = params.add("gen.top.W", dense_init<Real>(rng, cfg.d_top, w, gain));
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      const std::size_t in = cfg.scale_channels[k] * cfg.scale_sides[k] * cfg.scale_sides[k];
      skips_[k] = params.add("gen.skip" + std::to_string(k + 1) + ".W",
                             dense_init<Real>(rng, in, w, std::sqrt(double(in) / double(fan_in))));
    }
    bias_ = params.add("gen.b", Tensor<Real>::zeros({w}));
    out_w_ = params.add("gen.out.W", dense_init<Real>(rng, w, d_img, 0.5));
    out_b_ = params.add("gen.out.b", Tensor<Real>::zeros({d_img}));
  }

  Tensor<Real> operator()(const Tensor<Real>& f_s_top, const MotionEmbedding<Real>& z_d,
                          const MultiScaleFeatures<Real>& skips, const Tensor<Real>* fused4 = nullptr) const {
    if (fused4) detail::require_same_shape("generate", fused4->shape(), skips.grids[kQueryScale].shape());
    auto h0 = add(f_s_top, affine(z_d.z, lift_));
    auto pre = affine(h0, top_);
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      const auto& g = (k == kQueryScale && fused4) ? *fused4 : skips.grids[k];
      pre = add(pre, affine(reshape(g, {g.size()}), skips_[k]));
    }
    auto h = tanh(add(pre, bias_));
    return affine(h, out_w_, &out_b_);
  }

 private:
  Tensor<Real> lift_, top_, bias_, out_w_, out_b_;
  std::array<Tensor<Real>, kScaleCount> skips_;
};

/// D: observation -> probability.
template <class Real>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(ParameterSet<Real>& params, Rng& rng, const ModelConfig& cfg, std::size_t d_img) {
    w1_ = params.add("disc.W1", dense_init<Real>(rng, d_img, cfg.discriminator_width));
    b1_ = params.add("disc.b1", Tensor<Real>::zeros({cfg.discriminator_width}));
    w2_ = params.add("disc.W2", dense_init<Real>(rng, cfg.discriminator_width, 1));
    b2_ = params.add("disc.b2", Tensor<Real>::zeros({1}));
  }

  Tensor<Real> operator()(const Tensor<Real>& image) const {
    return sigmoid(affine(tanh(affine(image, w1_, &b1_)), w2_, &b2_));
  }

 private:
  Tensor<Real> w1_, b1_, w2_, b2_;
};

/// Baseline motion path when EMI is off: the plain mean of bias-free
/// projections of every pooled scale.
template <class Real>
class PooledMotion {
 public:
  PooledMotion() = default;
  PooledMotion(ParameterSet<Real>& params, Rng& rng, const ModelConfig& cfg) {
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      proj_[k] = params.add("base.motion_proj" + std::to_string(k + 1),
                            dense_init<Real>(rng, cfg.scale_channels[k], cfg.d_z));
    }
  }

  MotionEmbedding<Real> operator()(const MultiScaleFeatures<Real>& f) const {
    Tensor<Real> acc;
    for (std::size_t k = 0; k < kScaleCount; ++k) {
      auto part = affine(avg_pool_spatial(f.grids[k]), proj_[k]);
      acc = acc.defined() ? add(acc, part) : part;
    }
    return {scale(acc, Real(1) / Real(kScaleCount))};
  }

 private:
  std::array<Tensor<Real>, kScaleCount> proj_;
};

/// Mean absolute error.
template <class Real>
Tensor<Real> reconstruction_loss(const Tensor<Real>& driven, const Tensor<Real>& generated) {
  if (driven.size() != generated.size()) {
    throw DimensionError("reconstruction_loss: " + shape_string(driven.shape()) + " vs " +
                         shape_string(generated.shape()));
  }
  return mean(abs(sub(driven, generated)));
}

/// log D(I_d) + log(1 - D(I_g)), probabilities clamped away from 0 and 1.
template <class Real>
Tensor<Real> adversarial_loss(const Tensor<Real>& d_real, const Tensor<Real>& d_fake) {
  const Real lo = Real(kProbabilityClamp), hi = Real(1) - Real(kProbabilityClamp);
  auto real_term = log(clamp(d_real, lo, hi));
  auto fake_term = log(add_scalar(scale(clamp(d_fake, lo, hi), Real(-1)), Real(1)));
  return add(real_term, fake_term);
}

/// Non-saturating generator objective -log D(I_g).
template <class Real>
Tensor<Real> generator_adversarial_loss(const Tensor<Real>& d_fake) {
  const Real lo = Real(kProbabilityClamp), hi = Real(1) - Real(kProbabilityClamp);
  return scale(log(clamp(d_fake, lo, hi)), Real(-1));
}

enum class ForwardMode {
  train,      // EDI recalls with the driven address (or uses f_d_pi directly)
  inference,  // EDI recalls with the motion-source address only
};

/// Source-side substitutions used by the leakage sweep.
struct FeatureSwap {
  std::optional<std::size_t> scale;  // zero-based skip scale to take from the driven frame
  bool top = false;                  // take the driven top code
  bool motion = false;               // feed z_s instead of z_d
};

template <class Real>
struct PairForward {
  MultiScaleFeatures<Real> source, driven;
  MotionEmbedding<Real> z_s, z_d;
  // EDI intermediates; undefined when EDI is off.
  Tensor<Real> z_ds;
  CompressedToken<Real> f_s_pi, f_d_pi, recalled_d, recalled_s;
  AddressWeights<Real> omega_d, omega_ms;
  Tensor<Real> fused4;
  Tensor<Real> generated;
};

/// Encoder, motion path, optional EDI, generator and discriminator.
template <class Real>
class Model {
 public:
  Model(const ModelConfig& cfg, AblationFlags flags, std::size_t d_img, std::uint64_t seed)
      : cfg_(cfg), flags_(flags), d_img_(d_img) {
    if (cfg.d_c > cfg.scale_channels[kQueryScale]) {
      throw ContractError("model config: d_c must not exceed the scale-4 channel count");
    }
    Rng rng(seed);
    encoder_ = Encoder<Real>(params_, rng, cfg, d_img);
    if (flags.emi_on) {
      MotionConfig mc;
      mc.channels = cfg.scale_channels;
      mc.d_z = cfg.d_z;
      mc.extractor = {cfg.scale_channels[kQueryScale], cfg.d_model, cfg.query_tokens, cfg.extractor_blocks,
                      2 * cfg.d_model};
      emi_ = MotionIndicator<Real>(params_, rng, mc);
    } else {
      pooled_ = PooledMotion<Real>(params_, rng, cfg);
    }
    if (flags.edi_on) {
      DetailConfig dc;
      dc.channels = cfg.scale_channels[kQueryScale];
      dc.side = cfg.scale_sides[kQueryScale];
      dc.d_c = cfg.d_c;
      dc.d_z = cfg.d_z;
      dc.slots = cfg.slots;
      dc.d_attn = cfg.d_model;
      dc.heads = cfg.heads;
      edi_ = DetailIndicator<Real>(params_, rng, dc);
    }
    generator_ = Generator<Real>(params_, rng, cfg, d_img);
    discriminator_ = Discriminator<Real>(disc_params_, rng, cfg, d_img);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const AblationFlags& flags() const { return flags_; }
  std::size_t d_img() const { return d_img_; }

  ParameterSet<Real>& params() { return params_; }
  const ParameterSet<Real>& params() const { return params_; }
  ParameterSet<Real>& disc_params() { return disc_params_; }
  const ParameterSet<Real>& disc_params() const { return disc_params_; }

  MotionIndicator<Real>& emi() { return emi_; }
  const MotionIndicator<Real>& emi() const { return emi_; }
  DetailIndicator<Real>& edi() { return edi_; }
  const DetailIndicator<Real>& edi() const { return edi_; }

  /// Every trainable tensor, generator side first then discriminator.
  std::vector<typename ParameterSet<Real>::Entry*> all_parameters() {
    std::vector<typename ParameterSet<Real>::Entry*> out;
    for (auto& e : params_.entries()) out.push_back(&e);
    for (auto& e : disc_params_.entries()) out.push_back(&e);
    return out;
  }

  MultiScaleFeatures<Real> encode(const Tensor<Real>& image) const { return encoder_(image); }

  MotionEmbedding<Real> motion(const MultiScaleFeatures<Real>& f) const {
    return flags_.emi_on ? emi_.fuse(f) : pooled_(f);
  }

  Tensor<Real> generate(const Tensor<Real>& f_s_top, const MotionEmbedding<Real>& z_d,
                        const MultiScaleFeatures<Real>& skips, const Tensor<Real>* fused4 = nullptr) const {
    return generator_(f_s_top, z_d, skips, fused4);
  }

  Tensor<Real> discriminate(const Tensor<Real>& image) const { return discriminator_(image); }

  /// Full pair forward from precomputed features.
  PairForward<Real> forward(const MultiScaleFeatures<Real>& fs, const MultiScaleFeatures<Real>& fd, ForwardMode mode,
                            bool train_uses_recall = true, const FeatureSwap& swap = {}) const {
    PairForward<Real> out;
    out.source = fs;
    out.driven = fd;
    out.z_s = motion(fs);
    out.z_d = motion(fd);
    MultiScaleFeatures<Real> gen_src = fs;
    if (swap.scale) gen_src.grids.at(*swap.scale) = fd.grids.at(*swap.scale);
    if (swap.top) gen_src.top = fd.top;
    const MotionEmbedding<Real>& z_gen = swap.motion ? out.z_s : out.z_d;

    const Tensor<Real>* fused = nullptr;
    if (flags_.edi_on) {
      const auto& mem = edi_.memory;
      out.z_ds = motion_difference(out.z_d, out.z_s);
      out.f_s_pi = edi_.compress(gen_src.grids[kQueryScale]);
      out.f_d_pi = edi_.compress(fd.grids[kQueryScale]);
      const double t = cfg_.address_temperature;
      out.omega_d = address_driven(out.f_d_pi, mem.driven(), t);
      out.omega_ms = address_motion_source(out.f_s_pi, out.z_ds, mem.motion_source(), t);
      out.recalled_d = recall(out.omega_d, mem.driven());
      out.recalled_s = recall(out.omega_ms, mem.driven());
      const CompressedToken<Real>& token =
          mode == ForwardMode::inference ? out.recalled_s : (train_uses_recall ? out.recalled_d : out.f_d_pi);
      const auto& f4 = gen_src.grids[kQueryScale];
      out.fused4 = edi_.fuse(f4, edi_.decompress(token, f4.shape()));
      fused = &out.fused4;
    }
    out.generated = generate(gen_src.top, z_gen, gen_src, fused);
    return out;
  }

  PairForward<Real> forward(const Tensor<Real>& source_image, const Tensor<Real>& driven_image, ForwardMode mode,
                            bool train_uses_recall = true, const FeatureSwap& swap = {}) const {
    return forward(encode(source_image), encode(driven_image), mode, train_uses_recall, swap);
  }

  /// Inference-time animation of `source` by the motion in `driven`.
  Tensor<Real> animate(const std::vector<double>& source, const std::vector<double>& driven,
                       const FeatureSwap& swap = {}) const {
    return forward(to_tensor<Real>(source), to_tensor<Real>(driven), ForwardMode::inference, true, swap).generated;
  }

 private:
  ModelConfig cfg_;
  AblationFlags flags_;
  std::size_t d_img_;
  ParameterSet<Real> params_, disc_params_;
  Encoder<Real> encoder_;
  MotionIndicator<Real> emi_;
  PooledMotion<Real> pooled_;
  DetailIndicator<Real> edi_;
  Generator<Real> generator_;
  Discriminator<Real> discriminator_;
};

/// Per-step loss terms. Terms switched off by ablation flags are absent.
struct LossReport {
  std::size_t step = 0;
  double rec = 0;
  double adv = 0;
  std::optional<double> dis, dmem, align;
  double total = 0;
  double discriminator = 0;
  std::size_t slot_resets = 0;
};

/// Thrown when any loss term turns non-finite.
class TrainingAbort : public NumericError {
 public:
  TrainingAbort(std::string term, std::size_t step)
      : NumericError("non-finite " + term + " at step " + std::to_string(step)), term_(std::move(term)), step_(step) {}
  const std::string& term() const { return term_; }
  std::size_t step() const { return step_; }

 private:
  std::string term_;
  std::size_t step_;
};

/// One optimizer per side; holds the step counter.
template <class Real>
class Trainer {
 public:
  Trainer(Model<Real>& model, TrainConfig cfg, std::uint64_t seed)
      : model_(&model),
        cfg_(cfg),
        gen_opt_(model.params(), cfg.optimizer),
        disc_opt_(model.disc_params(), cfg.optimizer),
        guard_rng_(seed ^ 0x5851f42d4c957f2dULL) {
    const auto& w = cfg.weights;
    for (double l : {w.rec, w.adv, w.dis, w.dmem, w.align}) {
      if (!(l >= 0)) throw ContractError("loss weights must be non-negative");
    }
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t step_index() const { return step_; }

  LossReport train_step(const std::vector<SamplePair>& batch) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    auto& model = *model_;
    const auto& flags = model.flags();
    const auto& w = cfg_.weights;
    const bool use_dis = flags.emi_on && flags.ldis_on;
    const bool use_edi = flags.edi_on;
    const Real xi = static_cast<Real>(model.config().xi);
    const Real inv_b = Real(1) / static_cast<Real>(batch.size());

    model.params().zero_grad();
    model.disc_params().zero_grad();

    std::vector<Tensor<Real>> rec, adv, dis, dmem, align, driven_images, generated_images;
    for (const auto& pair : batch) {
      auto src = to_tensor<Real>(pair.source.observation);
      auto drv = to_tensor<Real>(pair.driven.observation);
      auto fw = guarded("forward", [&] { return model.forward(src, drv, ForwardMode::train, cfg_.train_uses_recall); });
      rec.push_back(guarded("L_rec", [&] { return reconstruction_loss(drv, fw.generated); }));
      adv.push_back(guarded("L_adv", [&] { return generator_adversarial_loss(model.discriminate(fw.generated)); }));
      if (use_dis) dis.push_back(guarded("L_dis", [&] { return disentanglement_loss(fw.z_s, fw.z_d, xi); }));
      if (use_edi) {
        dmem.push_back(guarded("L_dmem", [&] { return memory_loss(fw.f_d_pi, fw.recalled_d); }));
        align.push_back(guarded("L_align", [&] { return alignment_loss(fw.omega_ms, fw.omega_d); }));
      }
      driven_images.push_back(drv);
      generated_images.push_back(fw.generated);
    }

    auto batch_mean = [&](const std::vector<Tensor<Real>>& terms) { return scale(sum(concat(terms)), inv_b); };

    LossReport report;
    report.step = step_;
    auto l_rec = batch_mean(rec);
    auto l_adv = batch_mean(adv);
    report.rec = check("L_rec", l_rec.item());
    report.adv = check("L_adv", l_adv.item());
    auto total = add(scale(l_rec, Real(w.rec)), scale(l_adv, Real(w.adv)));
    if (use_dis) {
      auto l = batch_mean(dis);
      report.dis = check("L_dis", l.item());
      total = add(total, scale(l, Real(w.dis)));
    }
    if (use_edi) {
      auto lm = batch_mean(dmem);
      auto la = batch_mean(align);
      report.dmem = check("L_dmem", lm.item());
      report.align = check("L_align", la.item());
      total = add(total, add(scale(lm, Real(w.dmem)), scale(la, Real(w.align))));
    }
    report.total = check("total", total.item());

    backward(total);
    gen_opt_.step();
    if (use_edi) report.slot_resets = model.edi().memory.guard_underflow(guard_rng_).size();

    if (w.adv > 0) {
      // Discriminator ascends log D(I_d) + log(1 - D(I_g)) on detached fakes.
      model.disc_params().zero_grad();
      std::vector<Tensor<Real>> objective;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        objective.push_back(adversarial_loss(model.discriminate(driven_images[i]),
                                             model.discriminate(stop_gradient(generated_images[i]))));
      }
      auto d_loss = scale(batch_mean(objective), Real(-1));
      report.discriminator = check("L_D", d_loss.item());
      backward(d_loss);
      disc_opt_.step();
    }
    ++step_;
    return report;
  }

 private:
  // Runs one loss computation; a numeric failure or a non-finite scalar
  // result aborts the run naming the term.
  template <class Fn>
  auto guarded(const char* term, Fn&& fn) const {
    try {
      auto out = fn();
      if constexpr (std::is_same_v<decltype(out), Tensor<Real>>) check(term, out.item());
      return out;
    } catch (const TrainingAbort&) {
      throw;
    } catch (const NumericError&) {
      throw TrainingAbort(term, step_);
    } catch (const DomainError&) {
      throw TrainingAbort(term, step_);
    } catch (const DegenerateInputError&) {
      throw TrainingAbort(term, step_);
    }
  }

  double check(const char* term, double v) const {
    if (!std::isfinite(v)) throw TrainingAbort(term, step_);
    return v;
  }

  Model<Real>* model_;
  TrainConfig cfg_;
  AdaptiveOptimizer<Real> gen_opt_, disc_opt_;
  Rng guard_rng_;
  std::size_t step_ = 0;
};

/// Fixed evaluation pairs (same identity) drawn from their own stream.
inline std::vector<SamplePair> heldout_pairs(const SyntheticWorld& world, std::size_t n, std::uint64_t seed) {
  Rng rng(seed ^ 0xa0761d6478bd642fULL);
  std::vector<SamplePair> pairs;
  pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) pairs.push_back(world.sample_pair(world.draw_identity(rng), rng));
  return pairs;
}

/// Mean KL(Omega_ms || Omega_d) over `pairs`.
template <class Real>
double mean_alignment_kl(const Model<Real>& model, const std::vector<SamplePair>& pairs) {
  if (!model.flags().edi_on) throw ContractError("alignment KL needs an EDI model");
  double acc = 0;
  for (const auto& p : pairs) {
    auto fw = model.forward(to_tensor<Real>(p.source.observation), to_tensor<Real>(p.driven.observation),
                            ForwardMode::inference);
    acc += kl_divergence(fw.omega_ms.omega, fw.omega_d.omega).item();
  }
  return acc / static_cast<double>(pairs.size());
}

struct TrainingCallbacks {
  std::function<void(const LossReport&)> on_step;
  std::function<void(std::size_t step, double heldout_kl)> on_heldout;
};

/// Builds a model from `seed` and trains it on self-supervised pairs.
/// Deterministic in (configs, world, seed).
template <class Real>
std::unique_ptr<Model<Real>> run_training(const ModelConfig& model_cfg, const TrainConfig& cfg,
                                          const SyntheticWorld& world, std::uint64_t seed,
                                          const TrainingCallbacks& callbacks = {}) {
  auto model = std::make_unique<Model<Real>>(model_cfg, cfg.flags, world.config().d_img, seed);
  Trainer<Real> trainer(*model, cfg, seed);
  Rng data_rng(seed * 0x9e3779b97f4a7c15ULL + 1);
  const bool track = model->flags().edi_on && cfg.heldout_every > 0 && cfg.heldout_pairs > 0;
  const auto heldout = track ? heldout_pairs(world, cfg.heldout_pairs, world.config().seed) : std::vector<SamplePair>{};
  std::vector<SamplePair> batch(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto& p : batch) p = world.sample_pair(world.draw_identity(data_rng), data_rng);
    auto report = trainer.train_step(batch);
    if (callbacks.on_step) callbacks.on_step(report);
    if (track && callbacks.on_heldout && (step + 1) % cfg.heldout_every == 0) {
      callbacks.on_heldout(step + 1, mean_alignment_kl(*model, heldout));
    }
  }
  return model;
}

}  // namespace leakmem
