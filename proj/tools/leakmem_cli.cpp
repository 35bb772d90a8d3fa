// leakmem command-line driver: train, probe, gradcheck, memory-inspect, eval.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "leakmem/checkpoint.hpp"
#include "leakmem/config.hpp"
#include "leakmem/gradcheck.hpp"
#include "leakmem/leakage.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace leakmem;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kCheckpoint = 4, kCapability = 5 };

constexpr const char* kCheckpointFile = "checkpoint.lkm";

struct CapabilityError : Error {
  using Error::Error;
};

json swap_entry_json(const SwapEntry& e) {
  return {{"variable", e.variable},
          {"identity_similarity_to_source", e.similarity_to_source},
          {"identity_similarity_to_driven", e.similarity_to_driven},
          {"reconstruction_error", e.reconstruction_error}};
}

json report_json(const ProbeReport& r) {
  json scales = json::array();
  for (std::size_t k = 0; k < r.scales.size(); ++k) {
    auto e = swap_entry_json(r.scales[k]);
    e["scale"] = k + 1;
    e["driven_shift"] = r.driven_shift(k);
    scales.push_back(e);
  }
  return {{"setting", setting_name(r.setting)},
          {"baseline", swap_entry_json(r.baseline)},
          {"scales", scales},
          {"top", swap_entry_json(r.top)},
          {"motion", swap_entry_json(r.motion)},
          {"motion_probe_r2", r.motion_probe_r2}};
}

std::string report_csv(const ProbeReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "setting,scale,identity_similarity_to_source,identity_similarity_to_driven,reconstruction_error,driven_shift\n";
  for (std::size_t k = 0; k < r.scales.size(); ++k) {
    const auto& e = r.scales[k];
    os << setting_name(r.setting) << ',' << k + 1 << ',' << e.similarity_to_source << ',' << e.similarity_to_driven
       << ',' << e.reconstruction_error << ',' << r.driven_shift(k) << '\n';
  }
  return os.str();
}

json bank_json(const BankStats& b) {
  return {{"slot_norms", b.slot_norms},
          {"min_slot_norm", *std::min_element(b.slot_norms.begin(), b.slot_norms.end())},
          {"pairwise_cosine_histogram", {{"range", {-1.0, 1.0}}, {"counts", b.cosine_histogram}}},
          {"mean_address", b.mean_address},
          {"usage_entropy", b.usage_entropy}};
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

struct Loaded {
  Checkpoint ckpt;
  std::unique_ptr<Model<float>> model;
  std::unique_ptr<SyntheticWorld> world;
};

Loaded load(const std::string& path) {
  Loaded l;
  l.ckpt = load_checkpoint(path);
  l.model = restore_model<float>(l.ckpt);
  l.world = std::make_unique<SyntheticWorld>(l.ckpt.config.world);
  return l;
}

fs::path output_dir_for(const std::string& out, const std::string& ckpt) {
  fs::path dir = out.empty() ? fs::path(ckpt).parent_path() : fs::path(out);
  if (dir.empty()) dir = ".";
  fs::create_directories(dir);
  return dir;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  auto cfg = load_config(config_path);
  apply_seed_override(cfg, std::getenv("LEAKMEM_SEED"));
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (cfg.output_dir.empty()) throw ConfigError("output_dir", "no output directory (pass --out)");
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);

  SyntheticWorld world(cfg.world);
  std::string metrics, alignment;
  TrainingCallbacks cb;
  cb.on_step = [&](const LossReport& r) {
    json rec{{"step", r.step}, {"L_rec", r.rec}, {"L_adv", r.adv}, {"total", r.total}};
    if (r.dis) rec["L_dis"] = *r.dis;
    if (r.dmem) rec["L_dmem"] = *r.dmem;
    if (r.align) rec["L_align"] = *r.align;
    metrics += rec.dump() + "\n";
  };
  cb.on_heldout = [&](std::size_t step, double kl) {
    alignment += json{{"step", step}, {"heldout_kl", kl}}.dump() + "\n";
  };
  auto model = run_training<float>(cfg.model, cfg.train, world, cfg.seed, cb);

  write_file_atomic(dir / "metrics.jsonl", metrics);
  if (cfg.train.flags.edi_on) write_file_atomic(dir / "alignment.jsonl", alignment);
  // Where a run was written is not part of what it is.
  auto snapshot = cfg;
  snapshot.output_dir.clear();
  write_json(dir / "config.json", to_json(snapshot));
  save_checkpoint(dir / kCheckpointFile, capture(*model, snapshot));
  std::cout << "trained " << cfg.train.steps << " steps, seed " << cfg.seed << " -> " << (dir / kCheckpointFile).string()
            << "\n";
  return kOk;
}

int cmd_probe(const std::string& ckpt, const std::string& setting_text, const std::string& out, SweepOptions opt) {
  const auto setting = parse_setting(setting_text);
  auto l = load(ckpt);
  const auto report = feature_swap_sweep(*l.model, *l.world, setting, opt);
  const auto dir = output_dir_for(out, ckpt);
  const std::string stem = std::string("probe_") + setting_name(setting);
  write_json(dir / (stem + ".json"), report_json(report));
  write_file_atomic(dir / (stem + ".csv"), report_csv(report));
  std::cout << "wrote " << (dir / (stem + ".json")).string() << " and " << (dir / (stem + ".csv")).string() << "\n";
  return kOk;
}

int cmd_gradcheck(std::size_t probes, std::uint64_t seed, bool with_fixture, const std::string& out) {
  auto cases = default_grad_cases();
  if (with_fixture) cases.push_back(corrupted_adjoint_case());
  json table = json::array();
  bool ok = true;
  for (const auto& c : cases) {
    const auto r = run_case(c, probes, seed);
    ok = ok && r.passed;
    table.push_back({{"name", r.name},
                     {"max_relative_error", r.max_rel_error},
                     {"probes", r.probes},
                     {"coordinates", r.coordinates},
                     {"passed", r.passed}});
  }
  json doc{{"tolerance", kGradcheckTolerance}, {"step", kGradcheckStep}, {"passed", ok}, {"results", table}};
  if (!out.empty()) write_json(out, doc);
  std::cout << doc.dump(2) << "\n";
  return ok ? kOk : kFailure;
}

int cmd_memory_inspect(const std::string& ckpt, std::size_t samples, const std::string& out) {
  auto c = load_checkpoint(ckpt);
  if (!c.find("edi.M_d") || !c.find("edi.M_ms")) {
    throw CapabilityError("checkpoint " + ckpt + " has no detail memory (edi.M_d / edi.M_ms); it was trained with edi_on=false");
  }
  auto model = restore_model<float>(c);
  SyntheticWorld world(c.config.world);
  const auto st = inspect_memory(*model, world, samples, 0);
  json doc{{"slots", st.slots},
           {"samples", st.samples},
           {"max_entropy", st.max_entropy()},
           {"M_d", bank_json(st.driven)},
           {"M_ms", bank_json(st.motion_source)}};
  if (!out.empty()) write_json(out, doc);
  std::cout << doc.dump(2) << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& out, SweepOptions opt) {
  auto l = load(ckpt);
  const auto& model = *l.model;
  const auto& world = *l.world;
  json doc;
  doc["checkpoint"] = ckpt;
  doc["flags"] = to_json(l.ckpt.config)["train"]["flags"];
  doc["motion_leakage_r2"] = motion_leakage_score(model, world, opt.leakage_samples, opt.seed);
  const auto gap = self_vs_cross_gap(model, world, 500, opt.seed);
  doc["rec_error_self"] = gap.self_error;
  doc["rec_error_cross"] = gap.cross_error;
  doc["cross_minus_self"] = gap.gap();
  doc["probe"] = {{"self", report_json(feature_swap_sweep(model, world, DriveSetting::self, opt))},
                  {"cross", report_json(feature_swap_sweep(model, world, DriveSetting::cross, opt))}};
  if (model.flags().edi_on) {
    doc["retrieval_fidelity"] = retrieval_fidelity(model, world, 500, opt.seed);
    doc["heldout_alignment_kl"] =
        mean_alignment_kl(model, heldout_pairs(world, l.ckpt.config.train.heldout_pairs, world.config().seed));
  }
  if (!out.empty()) write_json(out, doc);
  std::cout << doc.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"leakmem: identity-leakage experiments on a synthetic identity x motion world"};
  app.require_subcommand(1);

  std::string config_path, out, ckpt, setting;
  SweepOptions sweep;
  std::size_t probes = 100, samples = 256;
  std::uint64_t gc_seed = 0;
  bool with_fixture = false;

  auto* train = app.add_subcommand("train", "train a model from a JSON config");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--out", out, "output directory (overrides output_dir in the config)");

  auto* probe = app.add_subcommand("probe", "feature-swap identity-leakage sweep");
  probe->add_option("--ckpt", ckpt, "checkpoint file")->required();
  probe->add_option("--setting", setting, "self|cross")->required();
  probe->add_option("--out", out, "output directory (default: next to the checkpoint)");
  probe->add_option("--pairs", sweep.pairs, "pairs per sweep");
  probe->add_option("--seed", sweep.seed, "evaluation seed");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every adjoint");
  gradcheck->add_option("--probes", probes, "random probes per case");
  gradcheck->add_option("--seed", gc_seed, "probe seed");
  gradcheck->add_option("--out", out, "also write the JSON report here");
  gradcheck->add_flag("--with-corrupted-fixture", with_fixture, "append a deliberately wrong adjoint");

  auto* inspect = app.add_subcommand("memory-inspect", "slot statistics of the detail memory");
  inspect->add_option("--ckpt", ckpt, "checkpoint file")->required();
  inspect->add_option("--samples", samples, "pairs used for the mean address");
  inspect->add_option("--out", out, "also write the JSON report here");

  auto* eval = app.add_subcommand("eval", "leakage and memory metrics of a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval->add_option("--out", out, "also write the JSON report here");
  eval->add_option("--seed", sweep.seed, "evaluation seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config_path, out);
    if (*probe) return cmd_probe(ckpt, setting, out, sweep);
    if (*gradcheck) return cmd_gradcheck(probes, gc_seed, with_fixture, out);
    if (*inspect) return cmd_memory_inspect(ckpt, samples, out);
    if (*eval) return cmd_eval(ckpt, out, sweep);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const CapabilityError& e) {
    std::cerr << "capability error: " << e.what() << "\n";
    return kCapability;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
