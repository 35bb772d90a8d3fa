#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "leakmem/pipeline.hpp"

namespace leakmem {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;

/// One sampled probe: the leaves to differentiate against and a closure that
/// rebuilds the computation from their current values.
struct GradInstance {
  std::vector<Tensor<double>> wrt;
  std::function<Tensor<double>()> eval;
};

struct GradCase {
  std::string name;
  std::function<GradInstance(Rng&)> make;
};

struct GradResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t probes = 0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// |a - c| / (|a| + |c| + 1e-12).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

namespace detail {

inline double weighted_total(const Tensor<double>& out, const std::vector<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * out[i];
  return s;
}

}  // namespace detail

/// Max relative error between the adjoint gradient and central differences of
/// sum_i w_i * out_i over every coordinate of every leaf in `inst.wrt`.
inline double finite_difference_check(GradInstance& inst, const std::vector<double>& weights, double h = kGradcheckStep,
                                      std::size_t* coordinates = nullptr) {
  for (auto& t : inst.wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  auto out = inst.eval();
  if (out.size() != weights.size()) throw DimensionError("finite_difference_check: weight count mismatch");
  backward(sum(mul(out, Tensor<double>(out.shape(), weights))));
  std::vector<std::vector<double>> analytic;
  for (auto& t : inst.wrt) {
    analytic.push_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                    : std::vector<double>(t.size(), 0.0));
    t.set_requires_grad(false);
  }
  double worst = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < inst.wrt.size(); ++k) {
    auto v = inst.wrt[k].mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x0 = v[i];
      v[i] = x0 + h;
      const double up = detail::weighted_total(inst.eval(), weights);
      v[i] = x0 - h;
      const double down = detail::weighted_total(inst.eval(), weights);
      v[i] = x0;
      worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2 * h)));
      ++n;
    }
  }
  for (auto& t : inst.wrt) t.set_requires_grad(true);
  if (coordinates) *coordinates += n;
  return worst;
}

inline GradResult run_case(const GradCase& c, std::size_t probes, std::uint64_t seed) {
  GradResult r;
  r.name = c.name;
  Rng rng(seed ^ std::hash<std::string>{}(c.name));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t p = 0; p < probes; ++p) {
    auto inst = c.make(rng);
    for (auto& t : inst.wrt) t.set_requires_grad(false);
    const std::size_t out_size = inst.eval().size();
    std::vector<double> w(out_size);
    for (auto& x : w) x = nd(rng);
    r.max_rel_error = std::max(r.max_rel_error, finite_difference_check(inst, w, kGradcheckStep, &r.coordinates));
    ++r.probes;
  }
  r.passed = r.max_rel_error < kGradcheckTolerance;
  return r;
}

namespace detail {

inline Tensor<double> gaussian(Rng& rng, Shape shape, double sd = 1.0) { return normal_tensor<double>(rng, shape, sd); }

// Entries bounded away from zero so kinks sit at least `margin` from a probe.
inline Tensor<double> off_kink(Rng& rng, Shape shape, double margin = 0.05) {
  auto t = gaussian(rng, shape);
  for (auto& x : t.mutable_data()) {
    if (std::abs(x) < margin) x = x < 0 ? -margin - std::abs(x) : margin + std::abs(x);
  }
  return t;
}

inline Tensor<double> positive(Rng& rng, Shape shape) {
  std::uniform_real_distribution<double> ud(0.2, 2.0);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = ud(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

template <class F>
GradCase unary(std::string name, Shape shape, F f) {
  return {name, [shape, f](Rng& rng) {
            auto x = gaussian(rng, shape);
            return GradInstance{{x}, [x, f]() { return f(x); }};
          }};
}

template <class F>
GradCase binary(std::string name, Shape a, Shape b, F f) {
  return {name, [a, b, f](Rng& rng) {
            auto x = gaussian(rng, a);
            auto y = gaussian(rng, b);
            return GradInstance{{x, y}, [x, y, f]() { return f(x, y); }};
          }};
}

// A tiny model: every module present, small enough to difference in full.
inline ModelConfig tiny_model_config() {
  ModelConfig m;
  m.scale_sides = {5, 4, 3, 2, 1};
  m.scale_channels = {1, 1, 2, 3, 2};
  m.d_top = 4;
  m.d_z = 3;
  m.d_model = 4;
  m.query_tokens = 2;
  m.extractor_blocks = 1;
  m.slots = 4;
  m.d_c = 3;
  m.heads = 2;
  m.generator_width = 5;
  m.discriminator_width = 3;
  return m;
}

inline std::vector<Tensor<double>> leaves(ParameterSet<double>& params) {
  std::vector<Tensor<double>> out;
  for (auto& e : params.entries()) out.push_back(e.tensor);
  return out;
}

}  // namespace detail

/// Every differentiable primitive, module composite and training loss term.
inline std::vector<GradCase> default_grad_cases() {
  using detail::binary;
  using detail::gaussian;
  using detail::unary;
  using T = Tensor<double>;
  std::vector<GradCase> cases;

  cases.push_back(binary("add", {3, 4}, {3, 4}, [](const T& a, const T& b) { return add(a, b); }));
  cases.push_back(binary("sub", {3, 4}, {3, 4}, [](const T& a, const T& b) { return sub(a, b); }));
  cases.push_back(binary("mul", {3, 4}, {3, 4}, [](const T& a, const T& b) { return mul(a, b); }));
  cases.push_back(unary("scale", {5}, [](const T& a) { return scale(a, -1.7); }));
  cases.push_back(unary("add_scalar", {5}, [](const T& a) { return add_scalar(a, 0.3); }));
  cases.push_back(unary("tanh", {6}, [](const T& a) { return tanh(a); }));
  cases.push_back(unary("sigmoid", {6}, [](const T& a) { return sigmoid(a); }));
  cases.push_back({"log", [](Rng& rng) {
                     auto x = detail::positive(rng, {6});
                     return GradInstance{{x}, [x]() { return log(x); }};
                   }});
  for (const char* name : {"abs", "relu"}) {
    const bool is_abs = std::string(name) == "abs";
    cases.push_back({name, [is_abs](Rng& rng) {
                       auto x = detail::off_kink(rng, {8});
                       return GradInstance{{x}, [x, is_abs]() { return is_abs ? abs(x) : relu(x); }};
                     }});
  }
  cases.push_back({"clamp", [](Rng& rng) {
                     // Keep probes away from the bounds at +-0.5.
                     auto x = gaussian(rng, {8});
                     for (auto& v : x.mutable_data()) {
                       if (std::abs(std::abs(v) - 0.5) < 0.05) v += 0.2;
                     }
                     return GradInstance{{x}, [x]() { return clamp(x, -0.5, 0.5); }};
                   }});
  cases.push_back(unary("reshape", {2, 6}, [](const T& a) { return reshape(a, {3, 4}); }));
  cases.push_back(binary("matmul", {3, 4}, {4, 2}, [](const T& a, const T& b) { return matmul(a, b); }));
  cases.push_back(unary("transpose", {3, 4}, [](const T& a) { return transpose(a); }));
  cases.push_back(
      binary("add_row_broadcast", {3, 4}, {4}, [](const T& a, const T& b) { return add_row_broadcast(a, b); }));
  cases.push_back(unary("broadcast_rows", {4}, [](const T& a) { return broadcast_rows(a, 3); }));
  cases.push_back(unary("mean_rows", {3, 4}, [](const T& a) { return mean_rows(a); }));
  cases.push_back(unary("slice_cols", {3, 5}, [](const T& a) { return slice_cols(a, 1, 3); }));
  cases.push_back(binary("concat_cols", {3, 2}, {3, 4}, [](const T& a, const T& b) { return concat_cols<double>({a, b}); }));
  cases.push_back(binary("concat", {3}, {2, 2}, [](const T& a, const T& b) { return concat<double>({a, b}); }));
  cases.push_back(unary("sum", {3, 4}, [](const T& a) { return sum(a); }));
  cases.push_back(unary("mean", {3, 4}, [](const T& a) { return mean(a); }));
  cases.push_back(unary("l2_norm", {7}, [](const T& a) { return l2_norm(a); }));
  cases.push_back(unary("avg_pool_spatial", {3, 2, 2}, [](const T& a) { return avg_pool_spatial(a); }));
  cases.push_back(unary("softmax", {6}, [](const T& a) { return softmax(a, 0.7); }));
  cases.push_back(unary("softmax_rows", {3, 5}, [](const T& a) { return softmax_rows(a, 0.5); }));
  cases.push_back(binary("cosine_similarity", {6}, {6}, [](const T& a, const T& b) { return cosine_similarity(a, b); }));
  cases.push_back(binary("cosine_similarity_rows", {5}, {4, 5},
                         [](const T& q, const T& m) { return cosine_similarity_rows(q, m); }));
  // Perturbing a probability vector leaves the simplex, so both arguments are
  // parameterized through softmax.
  cases.push_back(binary("kl_divergence", {6}, {6},
                         [](const T& a, const T& b) { return kl_divergence(softmax(a), softmax(b)); }));
  cases.push_back({"weighted_sum", [](Rng& rng) {
                     std::vector<T> in;
                     for (int i = 0; i < 3; ++i) in.push_back(gaussian(rng, {4}));
                     auto logits = gaussian(rng, {3});
                     auto wrt = in;
                     wrt.push_back(logits);
                     return GradInstance{wrt, [in, logits]() { return weighted_sum(in, logits); }};
                   }});

  // Module composites.
  cases.push_back({"extract_p", [](Rng& rng) {
                     auto params = std::make_shared<ParameterSet<double>>();
                     auto ex = std::make_shared<QueryExtractor<double>>(*params, rng, ExtractorConfig{3, 4, 2, 2, 5});
                     auto f4 = gaussian(rng, {3, 2, 2});
                     auto wrt = detail::leaves(*params);
                     wrt.push_back(f4);
                     return GradInstance{wrt, [params, ex, f4]() { return extract_p(f4, *ex); }};
                   }});
  cases.push_back({"fuse_motion", [](Rng& rng) {
                     auto params = std::make_shared<ParameterSet<double>>();
                     MotionConfig mc;
                     mc.channels = {1, 1, 2, 3, 2};
                     mc.d_z = 3;
                     mc.extractor = {3, 4, 2, 1, 5};
                     auto emi = std::make_shared<MotionIndicator<double>>(*params, rng, mc);
                     // Non-zero fusion logits so the weights are not uniform.
                     for (auto& x : emi->fusion_logits().mutable_data()) x = std::normal_distribution<double>()(rng);
                     MultiScaleFeatures<double> f;
                     const std::size_t sides[] = {5, 4, 3, 2, 1};
                     for (std::size_t k = 0; k < kScaleCount; ++k) f.grids[k] = gaussian(rng, {mc.channels[k], sides[k], sides[k]});
                     f.top = gaussian(rng, {2});
                     auto wrt = detail::leaves(*params);
                     for (auto& g : f.grids) wrt.push_back(g);
                     return GradInstance{wrt, [params, emi, f]() { return fuse_motion(f, *emi).z; }};
                   }});
  cases.push_back({"compress", [](Rng& rng) {
                     auto params = std::make_shared<ParameterSet<double>>();
                     DetailConfig dc{3, 2, 3, 2, 4, 4, 2};
                     auto c = std::make_shared<Compressor<double>>(*params, rng, dc);
                     auto f4 = gaussian(rng, {3, 2, 2});
                     auto wrt = detail::leaves(*params);
                     wrt.push_back(f4);
                     return GradInstance{wrt, [params, c, f4]() { return (*c)(f4).value; }};
                   }});
  cases.push_back({"decompress", [](Rng& rng) {
                     auto params = std::make_shared<ParameterSet<double>>();
                     DetailConfig dc{3, 2, 3, 2, 4, 4, 2};
                     auto d = std::make_shared<Decompressor<double>>(*params, rng, dc);
                     auto tok = gaussian(rng, {3});
                     auto wrt = detail::leaves(*params);
                     wrt.push_back(tok);
                     return GradInstance{wrt, [params, d, tok]() { return (*d)({tok}, Shape{3, 2, 2}); }};
                   }});
  cases.push_back(binary("recall", {4}, {4, 3}, [](const T& logits, const T& m) {
    return recall<double>({softmax(logits)}, m).value;
  }));
  cases.push_back({"mhca_fuse", [](Rng& rng) {
                     auto params = std::make_shared<ParameterSet<double>>();
                     DetailConfig dc{3, 2, 3, 2, 4, 4, 2};
                     auto fuse = std::make_shared<CrossAttentionFusion<double>>(*params, rng, dc);
                     auto fs = gaussian(rng, {3, 2, 2});
                     auto fh = gaussian(rng, {3, 2, 2});
                     auto wrt = detail::leaves(*params);
                     wrt.push_back(fs);
                     wrt.push_back(fh);
                     return GradInstance{wrt, [params, fuse, fs, fh]() { return (*fuse)(fs, fh); }};
                   }});

  // Composed loss terms.
  cases.push_back({"L_dis", [](Rng& rng) {
                     // Correlated pair so the hinge is active; probes near the kink are pushed off it.
                     auto zs = gaussian(rng, {6});
                     auto zd = zs.detach_copy();
                     auto noise = gaussian(rng, {6}, 0.6);
                     for (std::size_t i = 0; i < 6; ++i) zd.mutable_data()[i] += noise[i];
                     if (std::abs(cosine_similarity(zs, zd).item() - 0.1) < 0.01) zd.mutable_data()[0] += 0.5;
                     return GradInstance{{zs, zd}, [zs, zd]() {
                                           return disentanglement_loss<double>({zs}, {zd}, 0.1);
                                         }};
                   }});
  cases.push_back({"L_dmem", [](Rng& rng) {
                     auto f = gaussian(rng, {3});
                     auto md = gaussian(rng, {4, 3});
                     return GradInstance{{f, md}, [f, md]() {
                                           CompressedToken<double> tok{f};
                                           return memory_loss(tok, recall(address_driven(tok, md), md));
                                         }};
                   }});
  cases.push_back({"L_align", [](Rng& rng) {
                     // The driven address is a fixed target, so only the motion-source side is differenced.
                     auto fs = gaussian(rng, {3});
                     auto zds = gaussian(rng, {2});
                     auto mms = gaussian(rng, {4, 5});
                     auto fd = gaussian(rng, {3});
                     auto md = gaussian(rng, {4, 3});
                     return GradInstance{{fs, zds, mms}, [fs, zds, mms, fd, md]() {
                                           return alignment_loss(address_motion_source<double>({fs}, zds, mms),
                                                                 address_driven<double>({fd}, md));
                                         }};
                   }});

  // L_rec and L_adv through the generator (and the discriminator for L_adv):
  // generator weights and every generator input are differenced.
  for (const char* term : {"L_rec", "L_adv"}) {
    const bool rec = std::string(term) == "L_rec";
    cases.push_back({term, [rec](Rng& rng) {
                       const std::size_t d_img = 5;
                       const auto cfg = detail::tiny_model_config();
                       auto params = std::make_shared<ParameterSet<double>>();
                       auto disc_params = std::make_shared<ParameterSet<double>>();
                       auto gen = std::make_shared<Generator<double>>(*params, rng, cfg, d_img);
                       auto disc = std::make_shared<Discriminator<double>>(*disc_params, rng, cfg, d_img);
                       MultiScaleFeatures<double> skips;
                       for (std::size_t k = 0; k < kScaleCount; ++k) {
                         const std::size_t s = cfg.scale_sides[k];
                         skips.grids[k] = gaussian(rng, {cfg.scale_channels[k], s, s}, 0.5);
                       }
                       auto top = gaussian(rng, {cfg.d_top}, 0.5);
                       auto z = gaussian(rng, {cfg.d_z}, 0.5);
                       auto fused = gaussian(rng, skips.grids[kQueryScale].shape(), 0.5);
                       auto target = gaussian(rng, {d_img});
                       auto wrt = detail::leaves(*params);
                       for (auto& g : skips.grids) wrt.push_back(g);
                       for (const auto& t : {top, z, fused}) wrt.push_back(t);
                       return GradInstance{wrt, [=]() {
                                             auto out = (*gen)(top, MotionEmbedding<double>{z}, skips, &fused);
                                             return rec ? reconstruction_loss(target, out)
                                                        : generator_adversarial_loss((*disc)(out));
                                           }};
                     }});
  }
  cases.push_back({"L_adv_discriminator", [](Rng& rng) {
                     const std::size_t d_img = 5;
                     auto model =
                         std::make_shared<Model<double>>(detail::tiny_model_config(), AblationFlags{}, d_img, rng());
                     auto real = gaussian(rng, {d_img});
                     auto fake = gaussian(rng, {d_img});
                     auto wrt = detail::leaves(model->disc_params());
                     return GradInstance{wrt, [model, real, fake]() {
                                           return adversarial_loss(model->discriminate(real), model->discriminate(fake));
                                         }};
                   }});
  return cases;
}

/// Negative control: tanh whose adjoint is off by a factor of two. The check
/// must flag it by name.
inline GradCase corrupted_adjoint_case() {
  return {"corrupted_tanh_fixture", [](Rng& rng) {
            auto x = detail::gaussian(rng, {6});
            return GradInstance{{x}, [x]() {
                                  std::vector<double> v(x.size());
                                  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(x[i]);
                                  return detail::make_result<double>(
                                      x.shape(), std::move(v), "corrupted_tanh", {x}, [](TensorNode<double>& out) {
                                        auto* g = detail::input_grad(out, 0);
                                        for (std::size_t i = 0; i < g->size(); ++i) {
                                          (*g)[i] += 2.0 * out.grad[i] * (1.0 - out.value[i] * out.value[i]);
                                        }
                                      });
                                }};
          }};
}

inline std::vector<GradResult> run_gradcheck(const std::vector<GradCase>& cases, std::size_t probes = 100,
                                             std::uint64_t seed = 0) {
  std::vector<GradResult> out;
  for (const auto& c : cases) out.push_back(run_case(c, probes, seed));
  return out;
}

}  // namespace leakmem
