#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "synfoc/synfoc.hpp"

namespace fs = std::filesystem;
using namespace synfoc;

namespace {

void print_report(const std::string& name, const MetricReport& r) {
  for (const auto& d : r.domains) {
    std::printf("%-14s domain %d  DSC %.4f  Jaccard %.4f  HD95 %7.3f  ASD %7.3f  (n=%zu, flagged=%zu)\n", name.c_str(),
                d.domain, d.mean.dsc, d.mean.jaccard, d.mean.hd95, d.mean.asd, d.samples, d.flagged);
  }
  std::printf("%-14s mean      DSC %.4f  Jaccard %.4f  HD95 %7.3f  ASD %7.3f\n", name.c_str(), r.mean.dsc,
              r.mean.jaccard, r.mean.hd95, r.mean.asd);
}

Checkpoint pretrain_and_save(const Dataset& data, const fs::path& out, std::size_t epochs) {
  PretrainConfig pc = pretrain_config_for(data.manifest.config);
  if (epochs) pc.epochs = epochs;
  std::printf("pretraining foundation model: %zu samples, %zu epochs\n", pc.samples, pc.epochs);
  auto res = pretrain_foundation<float>(pc, [](std::size_t e, double loss) {
    std::printf("  epoch %zu  loss %.4f\n", e, loss);
    std::fflush(stdout);
  });
  std::printf("held-out objectness DSC %.4f (target %.2f)\n", res.holdout_dsc, pc.target_dsc);
  if (res.holdout_dsc < pc.target_dsc) std::printf("warning: pretraining fell short of the target DSC\n");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(out, res.ckpt);
  return res.ckpt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synergistic foundation + conventional model training for mixed-domain semi-supervised segmentation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-domain dataset");
  SplitConfig split;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", split.seed, "Master seed");
  gen->add_option("--domains", split.domains, "Number of domains");
  gen->add_option("--labeled", split.labeled, "Labeled samples (domain 0)");
  gen->add_option("--unlabeled", split.unlabeled, "Unlabeled samples (all domains)");
  gen->add_option("--test", split.test_per_domain, "Test samples per domain");
  gen->add_option("--classes", split.classes, "Foreground classes (1 or 2)");

  auto* pre = app.add_subcommand("pretrain", "Pretrain the foundation model on the objectness corpus");
  std::string pre_data, pre_out;
  std::size_t pre_epochs = 0;
  pre->add_option("--data", pre_data, "Dataset directory (provides seed, size and class count)")->required();
  pre->add_option("--out", pre_out, "Checkpoint path")->required();
  pre->add_option("--epochs", pre_epochs, "Override the epoch count");

  auto* train = app.add_subcommand("train", "Train one strategy");
  std::string cfg_path, strategy_override, data_override, out_override, found_override;
  std::uint64_t seed_override = 0;
  std::size_t tmax_override = 0;
  train->add_option("--config", cfg_path, "Config file")->required();
  train->add_option("--strategy", strategy_override, "Strategy override");
  train->add_option("--seed", seed_override, "Seed override");
  train->add_option("--data", data_override, "Dataset directory override");
  train->add_option("--out", out_override, "Output directory override");
  train->add_option("--foundation", found_override, "Foundation checkpoint override");
  train->add_option("--t-max", tmax_override, "Iteration count override");

  auto* ev = app.add_subcommand("eval", "Evaluate a training checkpoint on the test split");
  std::string ev_ckpt, ev_data;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();

  auto* suite = app.add_subcommand("suite", "Run every strategy and write a comparison table");
  std::string suite_cfg, suite_out;
  suite->add_option("--config", suite_cfg, "Config file")->required();
  suite->add_option("--out", suite_out, "Output directory")->required();
  suite->add_option("--t-max", tmax_override, "Iteration count override");

  CLI11_PARSE(app, argc, argv);
  tune_allocator();

  try {
    if (*gen) {
      const auto t0 = std::chrono::steady_clock::now();
      const Dataset ds = generate_dataset(split);
      save_dataset(gen_out, ds);
      std::printf("wrote %zu samples to %s in %.1f s\n", ds.samples.size(), gen_out.c_str(),
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    } else if (*pre) {
      const Dataset ds = load_dataset(pre_data);
      pretrain_and_save(ds, pre_out, pre_epochs);
    } else if (*train) {
      TrainConfig cfg = load_config(cfg_path);
      if (!strategy_override.empty()) cfg.strategy = parse_strategy(strategy_override);
      if (train->count("--seed")) cfg.seed = seed_override;
      if (!data_override.empty()) cfg.data_dir = data_override;
      if (!out_override.empty()) cfg.out_dir = out_override;
      if (!found_override.empty()) cfg.foundation_ckpt = found_override;
      if (tmax_override) cfg.t_max = tmax_override;
      cfg.validate();
      const Dataset ds = load_dataset(cfg.data_dir);
      std::optional<Checkpoint> found;
      if (uses_foundation(cfg.strategy)) {
        if (cfg.foundation_ckpt.empty()) throw ConfigError("foundation_ckpt is required for " + to_string(cfg.strategy));
        found = load_checkpoint(cfg.foundation_ckpt);
      }
      const auto res = run_training(cfg, ds, found ? &*found : nullptr, [&](const IterationRecord& r) {
        if ((r.iter + 1) % 50 == 0) {
          std::printf("iter %5zu  total %.4f  l_x %.4f  l_u %.4f  lambda %.4f\n", r.iter + 1, r.total, r.l_x, r.l_u,
                      r.lambda);
          std::fflush(stdout);
        }
      });
      if (res.conv_student) print_report("conv-student", *res.conv_student);
      if (res.found_student) print_report("found-student", *res.found_student);
      std::printf("outputs in %s (%.1f s)\n", cfg.out_dir.c_str(), res.seconds);
    } else if (*ev) {
      const Dataset ds = load_dataset(ev_data);
      const auto rep = evaluate_checkpoint<float>(load_checkpoint(ev_ckpt), ds);
      for (const auto& [role, r] : rep.reports) print_report(to_string(role), r);
    } else if (*suite) {
      TrainConfig cfg = load_config(suite_cfg);
      if (tmax_override) cfg.t_max = tmax_override;
      Dataset ds;
      if (!cfg.data_dir.empty() && fs::exists(fs::path(cfg.data_dir) / "manifest.json")) {
        ds = load_dataset(cfg.data_dir);
      } else {
        SplitConfig sc;
        sc.seed = cfg.seed;
        ds = generate_dataset(sc);
        if (!cfg.data_dir.empty()) save_dataset(cfg.data_dir, ds);
      }
      fs::path found_path = cfg.foundation_ckpt.empty() ? fs::path(suite_out) / "foundation.ckpt" : fs::path(cfg.foundation_ckpt);
      const Checkpoint found = fs::exists(found_path) ? load_checkpoint(found_path) : pretrain_and_save(ds, found_path, 0);
      const auto runs = run_suite(cfg, ds, &found, suite_out, suite_threads(),
                                  [](const std::string& msg) { std::printf("%s\n", msg.c_str()); });
      std::cout << suite_csv(runs);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
