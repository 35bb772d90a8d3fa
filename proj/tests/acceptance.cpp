// Acceptance harness: runs the ten criteria and prints one PASS/FAIL line each.
//
//   leakmem_acceptance --workdir DIR --cli PATH --reader PATH [--config PATH] [--only 1,4,...]
//
// The default-config run goes through the CLI so that its wall time,
// artifacts and checkpoint are the ones a user would get.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "leakmem/checkpoint.hpp"
#include "leakmem/gradcheck.hpp"
#include "leakmem/leakage.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace leakmem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string join(const std::vector<double>& v, int prec = 4) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt(x, prec);
  return s;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

int shell(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Evaluation seeds, fixed once.
constexpr std::uint64_t kLeakSeed = 11, kGapSeed = 12, kRetrievalSeed = 13, kSweepSeed = 14;

class Harness {
 public:
  Harness(fs::path workdir, std::string cli, std::string reader, RunConfig defaults)
      : work_(std::move(workdir)), cli_(std::move(cli)), reader_(std::move(reader)), defaults_(std::move(defaults)) {
    fs::create_directories(work_);
  }

  Verdict gradients() {
    const auto t0 = Clock::now();
    std::size_t failed = 0, cases = 0;
    double worst = 0;
    std::string worst_name, failures;
    for (const auto& c : default_grad_cases()) {
      const auto r = run_case(c, 100, 0);
      ++cases;
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_name = r.name;
      }
      if (!r.passed) {
        ++failed;
        failures += " " + r.name;
      }
    }
    const double secs = since(t0);
    return {failed == 0 && secs < 60.0, std::to_string(cases) + " cases x 100 probes, worst " + worst_name + " " +
                                            fmt(worst, 8) + ", " + fmt(secs, 1) + " s" +
                                            (failed ? ", failing:" + failures : "")};
  }

  Verdict addressing() {
    Rng rng(2024);
    const std::size_t slots = defaults_.model.slots, width = defaults_.model.d_c;
    const double temp = defaults_.model.address_temperature;
    std::size_t bad_sum = 0, bad_range = 0;
    double worst_dev = 0;
    for (int q = 0; q < 10000; ++q) {
      if (q % 100 == 0) bank_ = normal_tensor<float>(rng, {slots, width}, 1.0);
      const CompressedToken<float> f{normal_tensor<float>(rng, {width}, 1.0)};
      const auto w = address_driven(f, bank_, temp).omega;
      double s = 0;
      for (float x : w.data()) {
        s += x;
        if (!(x > 0.f && x < 1.f)) ++bad_range;
      }
      worst_dev = std::max(worst_dev, std::abs(s - 1.0));
      if (std::abs(s - 1.0) > 1e-6) ++bad_sum;
    }

    // One-hot recall returns the addressed slot exactly.
    bool exact = true;
    for (std::size_t i = 0; i < slots; ++i) {
      auto onehot = Tensor<float>::zeros({slots});
      onehot.mutable_data()[i] = 1.f;
      const auto got = recall(AddressWeights<float>{onehot}, bank_).value;
      for (std::size_t j = 0; j < width; ++j) exact = exact && got[j] == bank_[i * width + j];
    }

    // Three slots at cosines 1, 0, -1 from the query, unit temperature.
    const auto m = Tensor<double>({3, 2}, {1, 0, 0, 1, -1, 0});
    const auto w3 = address_driven(CompressedToken<double>{Tensor<double>::vector({2, 0})}, m, 1.0).omega;
    const double expect[3] = {0.66524, 0.24473, 0.09003};
    double dev3 = 0;
    for (int i = 0; i < 3; ++i) dev3 = std::max(dev3, std::abs(w3[i] - expect[i]));

    const bool pass = bad_sum == 0 && bad_range == 0 && exact && dev3 <= 1e-4;
    return {pass, "10000 queries: max |sum-1| " + fmt(worst_dev, 9) + ", out-of-range " + std::to_string(bad_range) +
                      "; one-hot recall " + (exact ? "exact" : "NOT exact") + "; S=3 case [" + fmt(w3[0], 5) + " " +
                      fmt(w3[1], 5) + " " + fmt(w3[2], 5) + "]"};
  }

  Verdict loss_oracles() {
    using T = Tensor<double>;
    const MotionEmbedding<double> z{T::vector({0.4, -1.2, 0.7})};
    const double dis = disentanglement_loss(z, z, 0.1).item();
    const double kl = kl_divergence(T::vector({0.5, 0.5}), T::vector({0.9, 0.1})).item();
    const auto img = T::vector({0.1, -0.3, 0.8, 0.25});
    const double rec = reconstruction_loss(img, img).item();
    const double adv = adversarial_loss(T::vector({0.5}), T::vector({0.5})).item();
    const bool pass = std::abs(dis - 0.9) < 1e-9 && std::abs(kl - 0.5108) <= 1e-3 && rec == 0.0 &&
                      std::abs(adv + 1.3863) <= 1e-4;
    return {pass, "L_dis " + fmt(dis, 6) + ", KL " + fmt(kl, 6) + ", L_rec " + fmt(rec, 6) + ", L_adv " + fmt(adv, 6)};
  }

  Verdict alignment() {
    const auto& run = default_run();
    std::map<std::size_t, std::pair<double, int>> win;
    double final_kl = -1;
    for (const auto& [step, kl] : run.heldout) {
      final_kl = kl;
      if (step <= 500) continue;
      auto& w = win[(step - 1) / 100];
      w.first += kl;
      ++w.second;
    }
    std::vector<double> means;
    for (const auto& [_, w] : win) means.push_back(w.first / w.second);
    std::size_t violations = 0;
    std::string where;
    for (std::size_t i = 1; i < means.size(); ++i) {
      if (!(means[i] < means[i - 1])) {
        ++violations;
        if (violations <= 3) where += " " + std::to_string(600 + 100 * i) + ":" + fmt(means[i - 1], 5) + "->" + fmt(means[i], 5);
      }
    }
    const bool pass = run.ok && final_kl >= 0 && final_kl < 0.05 && violations == 0 && means.size() >= 2 &&
                      run.seconds < 300.0;
    return {pass, "final held-out KL " + fmt(final_kl, 5) + ", " + std::to_string(violations) + " non-decreasing of " +
                      std::to_string(means.size()) + " windows" + (where.empty() ? "" : " (" + where.substr(1) + ")") +
                      ", train " + fmt(run.seconds, 1) + " s"};
  }

  Verdict retrieval() {
    const auto& run = default_run();
    if (!run.ok) return {false, "default run failed"};
    const double r = retrieval_fidelity(*run.model, *world_, 500, kRetrievalSeed);
    return {r >= 0.9, "fraction " + fmt(r, 3) + " of 500 held-out pairs"};
  }

  Verdict emi_effect() {
    std::vector<double> full, noldis;
    for (auto s : seeds()) {
      full.push_back(motion_leakage_score(model(Variant::full, s), *world_, 1000, kLeakSeed));
      noldis.push_back(motion_leakage_score(model(Variant::no_ldis, s), *world_, 1000, kLeakSeed));
    }
    const double mf = median(full), mn = median(noldis);
    return {mf < mn && mf <= 0.15 && mn >= 0.4,
            "median R2 with L_dis " + fmt(mf, 3) + " [" + join(full, 3) + "], without " + fmt(mn, 3) + " [" +
                join(noldis, 3) + "]"};
  }

  Verdict edi_effect() {
    std::vector<double> base_gap, full_gap, reduction;
    for (auto s : seeds()) {
      const auto b = self_vs_cross_gap(model(Variant::leaky, s), *world_, 500, kGapSeed);
      const auto f = self_vs_cross_gap(model(Variant::full, s), *world_, 500, kGapSeed);
      base_gap.push_back(b.gap());
      full_gap.push_back(f.gap());
      reduction.push_back(b.gap() > 0 ? 1.0 - f.gap() / b.gap() : 0.0);
    }
    const double mb = median(base_gap), mr = median(reduction);
    return {mb > 0 && mr >= 0.3, "baseline cross-self " + fmt(mb, 5) + " [" + join(base_gap, 5) + "], full [" +
                                     join(full_gap, 5) + "], median reduction " + fmt(100 * mr, 1) + "%"};
  }

  Verdict f4_dominance() {
    int hits = 0;
    std::string detail;
    for (auto s : seeds()) {
      SweepOptions opt;
      opt.seed = kSweepSeed;
      const auto r = feature_swap_sweep(model(Variant::leaky, s), *world_, DriveSetting::cross, opt);
      std::vector<double> shifts;
      for (std::size_t k = 0; k < kScaleCount; ++k) shifts.push_back(r.driven_shift(k));
      const auto top = std::size_t(std::max_element(shifts.begin(), shifts.end()) - shifts.begin());
      hits += top == kQueryScale;
      detail += " seed " + std::to_string(s) + ": f" + std::to_string(top + 1) + " [" + join(shifts, 3) + "];";
    }
    detail.pop_back();
    return {hits >= 2, std::to_string(hits) + "/3 seeds with f4 largest;" + detail};
  }

  Verdict reproducibility() {
    const auto& first = default_run();
    if (!first.ok) return {false, "default run failed"};
    const auto again = cli_train("default_rerun", defaults_);
    if (!again.ok) return {false, "rerun failed"};
    const auto a = first.dir, b = again.dir;
    const bool metrics = read_file((a / "metrics.jsonl").string()) == read_file((b / "metrics.jsonl").string());
    const bool align = read_file((a / "alignment.jsonl").string()) == read_file((b / "alignment.jsonl").string());
    const bool ckpt = read_file((a / "checkpoint.lkm").string()) == read_file((b / "checkpoint.lkm").string());
    // The in-process path must agree with the CLI bit for bit as well.
    const bool in_process = serialize(capture(model(Variant::full, defaults_.seed, false), defaults_)) ==
                            read_file((a / "checkpoint.lkm").string());
    return {metrics && align && ckpt && in_process,
            std::string("metrics ") + (metrics ? "identical" : "DIFFER") + ", alignment log " +
                (align ? "identical" : "DIFFERS") + ", checkpoint " + (ckpt ? "identical" : "DIFFERS") +
                ", in-process checkpoint " + (in_process ? "identical" : "DIFFERS")};
  }

  Verdict round_trip() {
    const auto& run = default_run();
    if (!run.ok) return {false, "default run failed"};
    const auto src = run.dir / "checkpoint.lkm";
    const auto bytes = read_file(src.string());
    const bool self = serialize(deserialize(bytes)) == bytes;
    const auto foreign = work_ / "foreign.lkm";
    fs::remove(foreign);
    const int rc = shell("python3 " + quote(reader_) + " " + quote(src.string()) + " --rewrite " +
                         quote(foreign.string()) + " > " + quote((work_ / "reader.log").string()) + " 2>&1");
    bool foreign_same = false, foreign_loads = false;
    if (rc == 0 && fs::exists(foreign)) {
      const auto other = read_file(foreign.string());
      foreign_same = other == bytes;
      try {
        auto m = restore_model<float>(deserialize(other));
        foreign_loads = serialize(capture(*m, deserialize(other).config)) == bytes;
      } catch (const Error&) {
      }
    }
    return {self && rc == 0 && foreign_same && foreign_loads,
            std::string("save-load-save ") + (self ? "identical" : "DIFFERS") + "; Python reader exit " +
                std::to_string(rc) + ", rewrite " + (foreign_same ? "identical" : "DIFFERS") + ", reloaded " +
                (foreign_loads ? "ok" : "FAILED")};
  }

 private:
  enum class Variant { full, no_ldis, leaky };

  struct CliRun {
    bool ok = false;
    fs::path dir;
    double seconds = 0;
    std::vector<std::pair<std::size_t, double>> heldout;
    std::unique_ptr<Model<float>> model;
  };

  std::vector<std::uint64_t> seeds() const { return {defaults_.seed, defaults_.seed + 1, defaults_.seed + 2}; }

  CliRun cli_train(const std::string& tag, const RunConfig& cfg) {
    CliRun run;
    run.dir = work_ / tag;
    fs::remove_all(run.dir);
    fs::create_directories(run.dir);
    const auto cfg_path = work_ / (tag + ".json");
    write_file_atomic(cfg_path, to_json(cfg).dump(2));
    const auto t0 = Clock::now();
    const int rc = shell("env -u LEAKMEM_SEED " + quote(cli_) + " train --config " + quote(cfg_path.string()) +
                         " --out " + quote(run.dir.string()) + " > " + quote((work_ / (tag + ".log")).string()) +
                         " 2>&1");
    run.seconds = since(t0);
    run.ok = rc == 0 && fs::exists(run.dir / "checkpoint.lkm");
    if (!run.ok) {
      std::cerr << "train " << tag << " exited " << rc << "; see " << (work_ / (tag + ".log")).string() << "\n";
      return run;
    }
    std::ifstream in(run.dir / "alignment.jsonl");
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      run.heldout.emplace_back(j.at("step").get<std::size_t>(), j.at("heldout_kl").get<double>());
    }
    run.model = restore_model<float>(load_checkpoint(run.dir / "checkpoint.lkm"));
    return run;
  }

  const CliRun& default_run() {
    if (!default_) {
      default_ = std::make_unique<CliRun>(cli_train("default", defaults_));
      world_ = std::make_unique<SyntheticWorld>(defaults_.world);
    }
    return *default_;
  }

  // Seed `defaults_.seed` of the full model reuses the CLI checkpoint unless
  // `reuse` is false.
  const Model<float>& model(Variant v, std::uint64_t seed, bool reuse = true) {
    default_run();
    if (reuse && v == Variant::full && seed == defaults_.seed && default_->ok) return *default_->model;
    const auto key = std::make_pair(int(v) + (reuse ? 0 : 8), seed);
    auto it = models_.find(key);
    if (it != models_.end()) return *it->second;
    auto train = defaults_.train;
    if (v == Variant::no_ldis) train.flags.ldis_on = false;
    if (v == Variant::leaky) train.flags = {false, false, false};
    train.heldout_every = v == Variant::full ? train.heldout_every : 0;
    const auto t0 = Clock::now();
    auto m = run_training<float>(defaults_.model, train, *world_, seed);
    std::cerr << "  trained variant " << int(v) << " seed " << seed << " in " << fmt(since(t0), 1) << " s\n";
    return *(models_[key] = std::move(m));
  }

  fs::path work_;
  std::string cli_, reader_;
  RunConfig defaults_;
  Tensor<float> bank_;
  std::unique_ptr<CliRun> default_;
  std::unique_ptr<SyntheticWorld> world_;
  std::map<std::pair<int, std::uint64_t>, std::unique_ptr<Model<float>>> models_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"leakmem acceptance criteria"};
  std::string workdir, cli, reader, config = LEAKMEM_DEFAULT_CONFIG;
  std::vector<int> only;
  app.add_option("--workdir", workdir)->required();
  app.add_option("--cli", cli)->required();
  app.add_option("--reader", reader)->required();
  app.add_option("--config", config, "default toy config");
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  RunConfig defaults;
  try {
    defaults = load_config(config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  defaults.output_dir.clear();
  Harness h(workdir, cli, reader, defaults);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient soundness", [&] { return h.gradients(); }},
      {"addressing contracts", [&] { return h.addressing(); }},
      {"loss unit oracles", [&] { return h.loss_oracles(); }},
      {"alignment convergence", [&] { return h.alignment(); }},
      {"retrieval fidelity", [&] { return h.retrieval(); }},
      {"EMI effect", [&] { return h.emi_effect(); }},
      {"EDI effect", [&] { return h.edi_effect(); }},
      {"f4 dominance", [&] { return h.f4_dominance(); }},
      {"reproducibility", [&] { return h.reproducibility(); }},
      {"checkpoint round-trip", [&] { return h.round_trip(); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = int(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << n << ". " << criteria[i].first << ": " << v.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
