#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "leakmem/pipeline.hpp"

using namespace leakmem;
using T = Tensor<double>;

namespace {

WorldConfig world_config() {
  WorldConfig c;
  c.seed = 7;
  return c;
}

ModelConfig model_config() {
  ModelConfig c;
  c.address_temperature = 0.1;
  return c;
}

std::vector<SamplePair> batch_of(const SyntheticWorld& w, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SamplePair> b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(w.sample_pair(w.draw_identity(rng), rng));
  return b;
}

std::vector<std::vector<double>> snapshot(Model<double>& m) {
  std::vector<std::vector<double>> out;
  for (auto* e : m.all_parameters()) out.push_back(e->tensor.to_vector());
  return out;
}

double grad_norm(const T& t) {
  if (!t.has_grad()) return 0;
  double s = 0;
  for (double g : t.grad()) s += g * g;
  return std::sqrt(s);
}

}  // namespace

TEST(Encode, DeterministicAndShaped) {
  SyntheticWorld w(world_config());
  Model<double> m(model_config(), {}, 64, 1);
  Rng rng(1);
  const auto img = to_tensor<double>(w.sample(0, rng).observation);
  const auto a = m.encode(img), b = m.encode(img);
  const auto& cfg = m.config();
  for (std::size_t k = 0; k < kScaleCount; ++k) {
    EXPECT_EQ(a.grids[k].to_vector(), b.grids[k].to_vector());
    EXPECT_EQ(a.grids[k].shape(), (Shape{cfg.scale_channels[k], cfg.scale_sides[k], cfg.scale_sides[k]}));
  }
  EXPECT_EQ(a.top.to_vector(), b.top.to_vector());
  EXPECT_NO_THROW(a.validate());
}

TEST(Encode, GradientReachesEveryBranch) {
  Model<double> m(model_config(), {}, 64, 2);
  Rng rng(2);
  const auto f = m.encode(normal_tensor<double>(rng, {64}, 1.0));
  T loss = sum(f.top);
  for (const auto& g : f.grids) loss = add(loss, sum(mul(g, g)));
  backward(loss);
  for (std::size_t k = 1; k <= kScaleCount; ++k) {
    EXPECT_GT(grad_norm(m.params().get("enc.scale" + std::to_string(k) + ".W")), 0.0) << "scale " << k;
  }
  EXPECT_GT(grad_norm(m.params().get("enc.top.W")), 0.0);
}

TEST(Encode, WrongObservationSize) {
  Model<double> m(model_config(), {}, 64, 3);
  EXPECT_THROW(m.encode(T::zeros({63})), DimensionError);
}

TEST(Generate, FusedEqualToSkipMatchesPlainPath) {
  Model<double> m(model_config(), {}, 64, 4);
  Rng rng(4);
  const auto f = m.encode(normal_tensor<double>(rng, {64}, 1.0));
  const auto z = m.motion(f);
  const auto plain = m.generate(f.top, z, f);
  const auto substituted = m.generate(f.top, z, f, &f.grids[kQueryScale]);
  EXPECT_EQ(plain.to_vector(), substituted.to_vector());
  EXPECT_EQ(plain.size(), 64u);
}

TEST(Generate, MotionSteersOutput) {
  Model<double> m(model_config(), {}, 64, 5);
  Rng rng(5);
  const auto f = m.encode(normal_tensor<double>(rng, {64}, 1.0));
  T z = normal_tensor<double>(rng, {16}, 1.0);
  z.set_requires_grad(true);
  backward(sum(m.generate(f.top, {z}, f)));
  EXPECT_GT(grad_norm(z), 0.0);
}

TEST(ReconstructionLoss, Oracles) {
  const T a = T::vector({0.5, -1.0, 2.0});
  EXPECT_EQ(reconstruction_loss(a, a).item(), 0.0);
  EXPECT_DOUBLE_EQ(reconstruction_loss(T::full({5}, 3.0), T::full({5}, 1.0)).item(), 2.0);
  EXPECT_DOUBLE_EQ(reconstruction_loss(T::vector({1, -3}), T::vector({0, 0})).item(), 2.0);
  EXPECT_THROW(reconstruction_loss(T::zeros({3}), T::zeros({4})), DimensionError);
}

TEST(AdversarialLoss, Oracles) {
  EXPECT_NEAR(adversarial_loss(T::scalar(0.5), T::scalar(0.5)).item(), 2.0 * std::log(0.5), 1e-12);
  EXPECT_NEAR(adversarial_loss(T::scalar(0.5), T::scalar(0.5)).item(), -1.3863, 1e-4);
  const double best = adversarial_loss(T::scalar(1.0), T::scalar(0.0)).item();
  EXPECT_LT(best, 0.0);
  EXPECT_GT(best, -1e-6);
  const double guarded = adversarial_loss(T::scalar(0.0), T::scalar(1.0)).item();
  EXPECT_TRUE(std::isfinite(guarded));
  EXPECT_NEAR(guarded, 2.0 * std::log(1e-7), 1e-6);
  EXPECT_TRUE(std::isfinite(generator_adversarial_loss(T::scalar(0.0)).item()));
}

TEST(Discriminator, OutputsAreProbabilities) {
  Model<double> m(model_config(), {}, 64, 6);
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const double p = m.discriminate(normal_tensor<double>(rng, {64}, 1.0 + 10.0 * (i % 3))).item();
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(TrainStep, ZeroWeightsChangeNothing) {
  SyntheticWorld w(world_config());
  Model<double> m(model_config(), {}, 64, 7);
  TrainConfig tc;
  tc.weights = {0, 0, 0, 0, 0};
  Trainer<double> trainer(m, tc, 7);
  const auto before = snapshot(m);
  const auto r = trainer.train_step(batch_of(w, 4, 1));
  EXPECT_EQ(r.total, 0.0);
  EXPECT_EQ(snapshot(m), before);
}

TEST(TrainStep, DisabledEmiDropsDisTermAndUsesPooledMotion) {
  SyntheticWorld w(world_config());
  Model<double> m(model_config(), {false, true, true}, 64, 8);
  EXPECT_EQ(m.params().scalar_count("emi."), 0u);
  EXPECT_GT(m.params().scalar_count("base.motion_proj"), 0u);
  Trainer<double> trainer(m, TrainConfig{}, 8);
  const auto r = trainer.train_step(batch_of(w, 4, 2));
  EXPECT_FALSE(r.dis.has_value());
  EXPECT_TRUE(r.dmem.has_value());
}

TEST(TrainStep, StepZeroTotalMatchesRecomputedTerms) {
  SyntheticWorld w(world_config());
  Model<double> m(model_config(), {}, 64, 9);
  TrainConfig tc;
  const auto batch = batch_of(w, 6, 3);
  // Independent recomputation before the update.
  double rec = 0, adv = 0, dis = 0, dmem = 0, align = 0;
  for (const auto& p : batch) {
    const auto src = to_tensor<double>(p.source.observation), drv = to_tensor<double>(p.driven.observation);
    const auto fw = m.forward(src, drv, ForwardMode::train);
    double mae = 0;
    for (std::size_t i = 0; i < 64; ++i) mae += std::abs(drv[i] - fw.generated[i]);
    rec += mae / 64.0;
    adv += -std::log(std::clamp(m.discriminate(fw.generated).item(), 1e-7, 1 - 1e-7));
    double zz = 0, ss = 0, dd = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      zz += fw.z_s.z[i] * fw.z_d.z[i];
      ss += fw.z_s.z[i] * fw.z_s.z[i];
      dd += fw.z_d.z[i] * fw.z_d.z[i];
    }
    dis += std::max(0.0, zz / std::sqrt(ss * dd) - 0.1);
    double diff = 0;
    for (std::size_t i = 0; i < 32; ++i) diff += std::pow(fw.f_d_pi.value[i] - fw.recalled_d.value[i], 2);
    dmem += std::sqrt(diff);
    double kl = 0;
    for (std::size_t i = 0; i < 64; ++i) {
      const double pm = fw.omega_ms.omega[i];
      kl += pm * std::log(pm / std::max(fw.omega_d.omega[i], 1e-8));
    }
    align += kl;
  }
  const double n = double(batch.size());
  const double expect = (rec + 0.1 * adv + dis + dmem + align) / n;
  Trainer<double> trainer(m, tc, 9);
  const auto r = trainer.train_step(batch);
  EXPECT_NEAR(r.total, expect, 1e-6);
  EXPECT_NEAR(r.rec, rec / n, 1e-9);
  EXPECT_NEAR(*r.align, align / n, 1e-9);
}

TEST(TrainStep, NonFiniteTermAbortsWithNameAndStep) {
  SyntheticWorld w(world_config());
  Model<double> m(model_config(), {}, 64, 10);
  Trainer<double> trainer(m, TrainConfig{}, 10);
  trainer.train_step(batch_of(w, 2, 4));
  m.params().get("gen.out.b").mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    trainer.train_step(batch_of(w, 2, 5));
    FAIL() << "expected TrainingAbort";
  } catch (const TrainingAbort& e) {
    EXPECT_EQ(e.term(), "L_rec");
    EXPECT_EQ(e.step(), 1u);
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(TrainStep, NegativeWeightRejected) {
  Model<double> m(model_config(), {}, 64, 11);
  TrainConfig tc;
  tc.weights.align = -1;
  EXPECT_THROW(Trainer<double>(m, tc, 1), ContractError);
}

TEST(Training, AdditivityBoundsAndProgress) {
  SyntheticWorld w(world_config());
  TrainConfig tc;
  tc.steps = 400;
  tc.heldout_every = 0;
  std::vector<LossReport> reports;
  TrainingCallbacks cb;
  cb.on_step = [&](const LossReport& r) { reports.push_back(r); };
  auto model = run_training<float>(model_config(), tc, w, 12, cb);
  ASSERT_EQ(reports.size(), 400u);
  const auto& lw = tc.weights;
  for (const auto& r : reports) {
    const double sum = lw.rec * r.rec + lw.adv * r.adv + lw.dis * *r.dis + lw.dmem * *r.dmem + lw.align * *r.align;
    EXPECT_NEAR(r.total, sum, 1e-6 * std::max(1.0, std::abs(sum))) << "step " << r.step;
    EXPECT_TRUE(std::isfinite(r.adv));
    EXPECT_TRUE(std::isfinite(r.discriminator));
  }
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    first += reports[i].rec;
    last += reports[reports.size() - 1 - i].rec;
  }
  EXPECT_LT(last, first);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double p = model->discriminate(normal_tensor<float>(rng, {64}, 1.0)).item();
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(Training, SameSeedSameLosses) {
  SyntheticWorld w(world_config());
  TrainConfig tc;
  tc.steps = 60;
  tc.heldout_every = 20;
  auto run = [&]() {
    std::vector<double> trace;
    TrainingCallbacks cb;
    cb.on_step = [&](const LossReport& r) {
      trace.insert(trace.end(), {r.rec, r.adv, *r.dis, *r.dmem, *r.align, r.total, r.discriminator});
    };
    cb.on_heldout = [&](std::size_t, double kl) { trace.push_back(kl); };
    run_training<double>(model_config(), tc, w, 13, cb);
    return trace;
  };
  EXPECT_EQ(run(), run());
}

TEST(Ablation, ParameterCountsAreIsolated) {
  const auto mc = model_config();
  Model<float> full(mc, {true, true, true}, 64, 1), no_edi(mc, {true, false, true}, 64, 1),
      no_emi(mc, {false, true, true}, 64, 1), base(mc, {false, false, true}, 64, 1);
  EXPECT_EQ(full.params().scalar_count("emi."), no_edi.params().scalar_count("emi."));
  EXPECT_EQ(full.params().scalar_count("edi."), no_emi.params().scalar_count("edi."));
  EXPECT_EQ(no_edi.params().scalar_count("edi."), 0u);
  EXPECT_EQ(base.params().scalar_count("emi.") + base.params().scalar_count("edi."), 0u);
  for (const char* shared : {"enc.", "gen.", "disc."}) {
    EXPECT_EQ(full.params().scalar_count(shared) + full.disc_params().scalar_count(shared),
              base.params().scalar_count(shared) + base.disc_params().scalar_count(shared))
        << shared;
  }
}

TEST(Model, RejectsTokenWiderThanScaleFour) {
  auto mc = model_config();
  mc.d_c = 64;
  EXPECT_THROW(Model<float>(mc, {}, 64, 1), ContractError);
}
