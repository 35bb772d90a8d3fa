#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "leakmem/pipeline.hpp"
#include "leakmem/probe.hpp"

namespace leakmem {

enum class DriveSetting { self, cross };

inline const char* setting_name(DriveSetting s) { return s == DriveSetting::self ? "self" : "cross"; }

inline DriveSetting parse_setting(const std::string& s) {
  if (s == "self") return DriveSetting::self;
  if (s == "cross") return DriveSetting::cross;
  throw ContractError("unknown setting '" + s + "' (expected self|cross)");
}

namespace detail {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) throw DegenerateInputError("cosine: zero-norm vector");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

template <class Real>
std::vector<double> to_doubles(const Tensor<Real>& t) {
  return {t.data().begin(), t.data().end()};
}

inline double mean_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / double(a.size());
}

}  // namespace detail

/// Linear identity read-out from raw observations; the stand-in for a face
/// identity network when scoring generated frames.
inline ProbeFit fit_observation_probe(const SyntheticWorld& world, std::size_t n, std::uint64_t seed) {
  Rng rng(seed ^ 0x2545f4914f6cdd1dULL);
  std::vector<std::vector<double>> reps, targets;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = world.sample(world.draw_identity(rng), rng);
    reps.push_back(std::move(s.observation));
    targets.push_back(std::move(s.identity_latent));
  }
  return fit_identity_probe(reps, targets);
}

/// Holdout R^2 of a linear probe from z_d to the driven identity latent.
/// 0 means the motion embedding carries no linearly decodable identity.
template <class Real>
double motion_leakage_score(const Model<Real>& model, const SyntheticWorld& world, std::size_t n, std::uint64_t seed) {
  Rng rng(seed ^ 0x94d049bb133111ebULL);
  std::vector<std::vector<double>> reps, targets;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = world.sample(world.draw_identity(rng), rng);
    auto z = model.motion(model.encode(to_tensor<Real>(s.observation)));
    reps.push_back(detail::to_doubles(z.z));
    targets.push_back(std::move(s.identity_latent));
  }
  return fit_identity_probe(reps, targets).holdout_r2;
}

struct SwapEntry {
  std::string variable;  // "baseline", "f1".."f5", "top", "motion"
  double similarity_to_source = 0;
  double similarity_to_driven = 0;
  double reconstruction_error = 0;
};

struct ProbeReport {
  DriveSetting setting = DriveSetting::self;
  SwapEntry baseline;
  std::vector<SwapEntry> scales;  // exactly five, f1..f5
  SwapEntry top;
  SwapEntry motion;
  double motion_probe_r2 = 0;

  /// Change in similarity to the driven identity caused by swapping scale k.
  double driven_shift(std::size_t k) const {
    return scales.at(k).similarity_to_driven - baseline.similarity_to_driven;
  }
};

template <class Urbg>
std::vector<SamplePair> draw_pairs(const SyntheticWorld& world, DriveSetting setting, std::size_t n, Urbg& rng) {
  std::vector<SamplePair> pairs;
  pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (setting == DriveSetting::self) {
      pairs.push_back(world.sample_pair(world.draw_identity(rng), rng));
    } else {
      auto [a, b] = world.draw_distinct_identities(rng);
      pairs.push_back(world.sample_cross_pair(a, b, rng));
    }
  }
  return pairs;
}

/// Regenerates each pair with one source-side variable replaced by its
/// driven-frame counterpart and scores the recovered identity of the output.
template <class Real>
ProbeReport feature_swap_sweep(const Model<Real>& model, const IdentityProbe& identity, const std::vector<SamplePair>& pairs,
                               DriveSetting setting) {
  if (pairs.empty()) throw ContractError("feature_swap_sweep: no pairs");
  std::vector<FeatureSwap> swaps;
  std::vector<std::string> names;
  swaps.push_back({});
  names.push_back("baseline");
  for (std::size_t k = 0; k < kScaleCount; ++k) {
    FeatureSwap s;
    s.scale = k;
    swaps.push_back(s);
    names.push_back("f" + std::to_string(k + 1));
  }
  swaps.push_back({std::nullopt, true, false});
  names.push_back("top");
  swaps.push_back({std::nullopt, false, true});
  names.push_back("motion");

  std::vector<SwapEntry> entries(swaps.size());
  for (std::size_t v = 0; v < swaps.size(); ++v) entries[v].variable = names[v];
  for (const auto& p : pairs) {
    auto fs = model.encode(to_tensor<Real>(p.source.observation));
    auto fd = model.encode(to_tensor<Real>(p.driven.observation));
    for (std::size_t v = 0; v < swaps.size(); ++v) {
      auto out = detail::to_doubles(model.forward(fs, fd, ForwardMode::inference, true, swaps[v]).generated);
      auto recovered = identity.predict(out);
      entries[v].similarity_to_source += detail::cosine(recovered, p.source.identity_latent);
      entries[v].similarity_to_driven += detail::cosine(recovered, p.driven.identity_latent);
      entries[v].reconstruction_error += detail::mean_abs_diff(out, p.driven.observation);
    }
  }
  const double inv = 1.0 / double(pairs.size());
  for (auto& e : entries) {
    e.similarity_to_source *= inv;
    e.similarity_to_driven *= inv;
    e.reconstruction_error *= inv;
  }
  ProbeReport report;
  report.setting = setting;
  report.baseline = entries[0];
  report.scales.assign(entries.begin() + 1, entries.begin() + 1 + kScaleCount);
  report.top = entries[1 + kScaleCount];
  report.motion = entries[2 + kScaleCount];
  return report;
}

struct SweepOptions {
  std::size_t pairs = 200;
  std::size_t probe_samples = 2000;
  std::size_t leakage_samples = 1000;
  std::uint64_t seed = 0;
};

template <class Real>
ProbeReport feature_swap_sweep(const Model<Real>& model, const SyntheticWorld& world, DriveSetting setting,
                               const SweepOptions& opt = {}) {
  const auto identity = fit_observation_probe(world, opt.probe_samples, opt.seed);
  Rng rng(opt.seed ^ (setting == DriveSetting::self ? 0x1111ULL : 0x2222ULL));
  auto report = feature_swap_sweep(model, identity.probe, draw_pairs(world, setting, opt.pairs, rng), setting);
  report.motion_probe_r2 = motion_leakage_score(model, world, opt.leakage_samples, opt.seed);
  return report;
}

struct SelfCrossGap {
  double self_error = 0;
  double cross_error = 0;
  double gap() const { return cross_error - self_error; }
};

/// Mean absolute error against the true frame of the source identity
/// performing the driven motion, in the self and cross settings. Both
/// settings use the same driven frames.
template <class Real>
SelfCrossGap self_vs_cross_gap(const Model<Real>& model, const SyntheticWorld& world, std::size_t n,
                               std::uint64_t seed) {
  Rng rng(seed ^ 0x7f4a7c159e3779b9ULL);
  SelfCrossGap gap;
  for (std::size_t i = 0; i < n; ++i) {
    auto [id_d, id_other] = world.draw_distinct_identities(rng);
    auto driven = world.sample(id_d, rng);
    auto self_src = world.sample(id_d, rng);
    auto cross_src = world.sample(id_other, rng);
    auto self_out = detail::to_doubles(model.animate(self_src.observation, driven.observation));
    auto cross_out = detail::to_doubles(model.animate(cross_src.observation, driven.observation));
    gap.self_error += detail::mean_abs_diff(self_out, driven.observation);
    gap.cross_error +=
        detail::mean_abs_diff(cross_out, world.render(cross_src.identity_latent, driven.motion_latent));
  }
  gap.self_error /= double(n);
  gap.cross_error /= double(n);
  return gap;
}

/// Fraction of held-out same-identity pairs whose motion-source recall is
/// closer (cosine) to the true driven token than to the token of a frame of
/// another identity.
template <class Real>
double retrieval_fidelity(const Model<Real>& model, const SyntheticWorld& world, std::size_t n, std::uint64_t seed) {
  if (!model.flags().edi_on) throw ContractError("retrieval_fidelity needs an EDI model");
  Rng rng(seed ^ 0x3c6ef372fe94f82bULL);
  std::size_t wins = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto [id, other] = world.draw_distinct_identities(rng);
    auto pair = world.sample_pair(id, rng);
    auto stranger = world.sample(other, rng);
    auto fw = model.forward(to_tensor<Real>(pair.source.observation), to_tensor<Real>(pair.driven.observation),
                            ForwardMode::inference);
    auto f_other = model.edi().compress(model.encode(to_tensor<Real>(stranger.observation)).grids[kQueryScale]);
    auto recalled = detail::to_doubles(fw.recalled_s.value);
    if (detail::cosine(recalled, detail::to_doubles(fw.f_d_pi.value)) >
        detail::cosine(recalled, detail::to_doubles(f_other.value))) {
      ++wins;
    }
  }
  return double(wins) / double(n);
}

struct BankStats {
  std::vector<double> slot_norms;
  // Pairwise slot cosines over i < j, 20 equal bins on [-1, 1].
  std::vector<std::size_t> cosine_histogram;
  std::vector<double> mean_address;
  double usage_entropy = 0;
};

struct MemoryStats {
  std::size_t slots = 0;
  std::size_t samples = 0;
  BankStats driven, motion_source;
  double max_entropy() const { return std::log(double(slots)); }
};

inline constexpr std::size_t kCosineBins = 20;

namespace detail {

template <class Real>
void fill_bank_shape(const Tensor<Real>& bank, BankStats& out) {
  const std::size_t S = bank.dim(0), n = bank.dim(1);
  std::vector<std::vector<double>> rows(S);
  for (std::size_t i = 0; i < S; ++i) {
    rows[i].assign(bank.data().begin() + std::ptrdiff_t(i * n), bank.data().begin() + std::ptrdiff_t((i + 1) * n));
    double s = 0;
    for (double x : rows[i]) s += x * x;
    out.slot_norms.push_back(std::sqrt(s));
  }
  out.cosine_histogram.assign(kCosineBins, 0);
  for (std::size_t i = 0; i < S; ++i) {
    for (std::size_t j = i + 1; j < S; ++j) {
      const double c = cosine(rows[i], rows[j]);
      out.cosine_histogram[std::min(kCosineBins - 1, std::size_t((c + 1.0) / 2.0 * kCosineBins))]++;
    }
  }
}

inline double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double x : p) {
    if (x > 0) h -= x * std::log(x);
  }
  return h;
}

}  // namespace detail

/// Slot norms, pairwise slot cosines and the entropy of the mean address over
/// `n` held-out same-identity pairs, for both banks.
template <class Real>
MemoryStats inspect_memory(const Model<Real>& model, const SyntheticWorld& world, std::size_t n, std::uint64_t seed) {
  if (!model.flags().edi_on) throw ContractError("memory inspection needs an EDI model");
  const auto& mem = model.edi().memory;
  MemoryStats st;
  st.slots = mem.slots();
  st.samples = n;
  detail::fill_bank_shape(mem.driven(), st.driven);
  detail::fill_bank_shape(mem.motion_source(), st.motion_source);
  st.driven.mean_address.assign(st.slots, 0.0);
  st.motion_source.mean_address.assign(st.slots, 0.0);
  Rng rng(seed ^ 0x8ebc6af09c88c6e3ULL);
  for (std::size_t i = 0; i < n; ++i) {
    auto pair = world.sample_pair(world.draw_identity(rng), rng);
    auto fw = model.forward(to_tensor<Real>(pair.source.observation), to_tensor<Real>(pair.driven.observation),
                            ForwardMode::inference);
    for (std::size_t k = 0; k < st.slots; ++k) {
      st.driven.mean_address[k] += fw.omega_d.omega[k] / double(n);
      st.motion_source.mean_address[k] += fw.omega_ms.omega[k] / double(n);
    }
  }
  st.driven.usage_entropy = detail::entropy(st.driven.mean_address);
  st.motion_source.usage_entropy = detail::entropy(st.motion_source.mean_address);
  return st;
}

}  // namespace leakmem
