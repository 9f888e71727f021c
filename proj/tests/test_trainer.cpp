#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "synfoc/synfoc.hpp"

using namespace synfoc;
namespace fs = std::filesystem;

namespace {

const Dataset& tiny_data() {
  static const Dataset ds = [] {
    SplitConfig c;
    c.seed = 5;
    c.labeled = 4;
    c.unlabeled = 12;
    c.test_per_domain = 3;
    c.height = 16;
    c.width = 16;
    return generate_dataset(c);
  }();
  return ds;
}

const Checkpoint& tiny_foundation() {
  static const Checkpoint ckpt = [] {
    PretrainConfig pc = pretrain_config_for(tiny_data().manifest.config);
    pc.samples = 24;
    pc.holdout = 8;
    pc.epochs = 1;
    return pretrain_foundation<float>(pc).ckpt;
  }();
  return ckpt;
}

TrainConfig tiny_config(Strategy s, std::size_t t_max) {
  TrainConfig c;
  c.strategy = s;
  c.t_max = t_max;
  c.labeled_batch = 2;
  c.unlabeled_batch = 2;
  c.eval_interval = 1000;
  c.out_dir.clear();
  c.seed = 3;
  return c;
}

std::string log_csv(const ExperimentLog& log) {
  std::ostringstream os;
  log.write_log_csv(os);
  return os.str();
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndOverrides) {
  std::istringstream is(
      "# run\n"
      "strategy = cps\n"
      "t_max = 40  # short\n"
      "conv_lr = 0.01\n"
      "found_weight_decay = 0.05\n"
      "smc = off\n"
      "s_norm = literal\n"
      "precision = f64\n"
      "strategies = synfoc, linear\n");
  const auto c = parse_config(is);
  EXPECT_EQ(c.strategy, Strategy::kCps);
  EXPECT_EQ(c.t_max, 40u);
  EXPECT_DOUBLE_EQ(c.conv_opt.lr, 0.01);
  EXPECT_DOUBLE_EQ(c.found_opt.weight_decay, 0.05);
  EXPECT_FALSE(c.smc);
  EXPECT_EQ(c.s_norm, SNorm::kLiteral);
  EXPECT_EQ(c.precision, Precision::kFloat64);
  EXPECT_EQ(c.suite_strategies, (std::vector<Strategy>{Strategy::kSynFoC, Strategy::kLinear}));
  std::istringstream again(format_config(c));
  const auto d = parse_config(again);
  EXPECT_EQ(format_config(d), format_config(c));
}

TEST(Config, DefaultsFollowReferenceRecipe) {
  const TrainConfig c;
  EXPECT_EQ(c.conv_opt.kind, OptimizerKind::kSgdMomentum);
  EXPECT_DOUBLE_EQ(c.conv_opt.lr, 0.03);
  EXPECT_DOUBLE_EQ(c.conv_opt.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.conv_opt.weight_decay, 1e-4);
  EXPECT_EQ(c.found_opt.kind, OptimizerKind::kAdamW);
  EXPECT_DOUBLE_EQ(c.found_opt.lr, 1e-4);
  EXPECT_DOUBLE_EQ(c.found_opt.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.found_opt.weight_decay, 0.1);
  EXPECT_EQ(c.lora_rank, 4u);
  EXPECT_DOUBLE_EQ(c.tau, 0.95);
  EXPECT_EQ(c.labeled_batch + c.unlabeled_batch, 8u);
}

TEST(Config, RejectsBadInput) {
  std::istringstream unknown("speed = 3\n"), malformed("t_max 3\n"), range("tau = 1.5\n"), boolean("cdcr = maybe\n");
  EXPECT_THROW(parse_config(unknown), ConfigError);
  EXPECT_THROW(parse_config(malformed), ConfigError);
  EXPECT_THROW(parse_config(range), ConfigError);
  EXPECT_THROW(parse_config(boolean), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/file.cfg"), ConfigError);
}

TEST(Config, ShippedDefaultConfigLoads) {
  const auto c = load_config(fs::path(SYNFOC_SOURCE_DIR) / "configs" / "default.cfg");
  EXPECT_EQ(c.suite_strategies.size(), all_strategies().size());
}

TEST(Trainer, SingleIterationLogsOneRecord) {
  Trainer<float> tr(tiny_config(Strategy::kSynFoC, 1), tiny_data(), &tiny_foundation());
  tr.run();
  const auto& recs = tr.log().iterations();
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].iter, 0u);
  EXPECT_NEAR(recs[0].lambda, 0.006738, 5e-7);
  EXPECT_EQ(recs[0].phi_self.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(recs[0].alpha[i], recs[0].phi_self[i] * recs[0].phi_mut[i]);
  EXPECT_FALSE(std::isnan(recs[0].pl_ensemble));
  EXPECT_TRUE(std::isfinite(recs[0].total));
  // evaluation at the end covers all four networks
  for (auto role : tr.roles()) EXPECT_NE(tr.log().last_report(role), nullptr);
  EXPECT_EQ(tr.roles().size(), 4u);
  EXPECT_NO_THROW(tr.audit_backbone());
}

TEST(Trainer, StandaloneRunsUseOneModel) {
  Trainer<float> conv(tiny_config(Strategy::kStandaloneConv, 2), tiny_data(), nullptr);
  conv.run();
  EXPECT_FALSE(conv.has_foundation());
  EXPECT_TRUE(std::isnan(conv.log().iterations()[0].pl_found));
  EXPECT_THROW(Trainer<float>(tiny_config(Strategy::kStandaloneFound, 2), tiny_data(), nullptr), ConfigError);
  Trainer<float> found(tiny_config(Strategy::kStandaloneFound, 2), tiny_data(), &tiny_foundation());
  found.run();
  EXPECT_FALSE(found.has_conventional());
  EXPECT_EQ(found.roles().size(), 2u);
}

TEST(Trainer, FrozenBackboneAuditCatchesChanges) {
  Trainer<float> tr(tiny_config(Strategy::kStandaloneFound, 2), tiny_data(), &tiny_foundation());
  tr.run();
  EXPECT_NO_THROW(tr.audit_backbone());
  tr.foundation().student.backbone_parameters()[0]->value[0] += 1.0f;
  EXPECT_THROW(tr.audit_backbone(), TrainingError);
}

TEST(Trainer, SameSeedGivesIdenticalLog) {
  Trainer<float> a(tiny_config(Strategy::kSynFoC, 3), tiny_data(), &tiny_foundation());
  Trainer<float> b(tiny_config(Strategy::kSynFoC, 3), tiny_data(), &tiny_foundation());
  a.run();
  b.run();
  EXPECT_EQ(log_csv(a.log()), log_csv(b.log()));
  auto other = tiny_config(Strategy::kSynFoC, 3);
  other.seed = 4;
  Trainer<float> c(other, tiny_data(), &tiny_foundation());
  c.run();
  EXPECT_NE(log_csv(a.log()), log_csv(c.log()));
}

TEST(Trainer, StrategiesShareBatches) {
  Trainer<float> a(tiny_config(Strategy::kSynFoC, 2), tiny_data(), &tiny_foundation());
  Trainer<float> b(tiny_config(Strategy::kStandaloneConv, 2), tiny_data(), nullptr);
  a.run();
  b.run();
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a.log().iterations()[i].batch_seed, b.log().iterations()[i].batch_seed);
}

TEST(Trainer, DivergenceRaisesWithContext) {
  auto cfg = tiny_config(Strategy::kStandaloneConv, 5);
  cfg.conv_opt.lr = 1e30;
  Trainer<float> tr(cfg, tiny_data(), nullptr);
  try {
    tr.run();
    FAIL() << "expected a TrainingError";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("iteration"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch seed"), std::string::npos) << msg;
  }
}

TEST(Evaluation, OraclePredictorIsPerfect) {
  const auto& ds = tiny_data();
  // Predict each test image's own label by matching pixel content.
  const Predictor oracle = [&](const Tensor<float>& x) {
    const std::size_t n = x.dim(0), plane = x.dim(2) * x.dim(3);
    LabelMap out({n, x.dim(2), x.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
      for (const auto& s : ds.samples) {
        if (std::equal(s.image.data(), s.image.data() + plane, x.data() + i * plane)) {
          std::copy_n(s.label.data(), plane, out.data() + i * plane);
          break;
        }
      }
    }
    return out;
  };
  const auto r = evaluate_predictor(ds, oracle);
  ASSERT_EQ(r.domains.size(), 3u);
  EXPECT_DOUBLE_EQ(r.mean.dsc, 1.0);
  EXPECT_DOUBLE_EQ(r.mean.hd95, 0.0);
  EXPECT_DOUBLE_EQ(r.mean.asd, 0.0);
  const auto empty = evaluate_predictor(ds, [](const Tensor<float>& x) { return LabelMap({x.dim(0), x.dim(2), x.dim(3)}, 0); });
  EXPECT_DOUBLE_EQ(empty.mean.dsc, 0.0);
  EXPECT_EQ(empty.flagged, 9u);
}

TEST(Evaluation, UntrainedConventionalModelIsPoor) {
  Rng rng(1);
  ConvSegNet<float> net(1, rng);
  EXPECT_LT(evaluate_predictor(tiny_data(), conv_predictor(net)).mean.dsc, 0.5);
}

TEST(Evaluation, CheckpointRoundTripReproducesMetrics) {
  Trainer<float> tr(tiny_config(Strategy::kSynFoC, 2), tiny_data(), &tiny_foundation());
  tr.run();
  const auto path = fs::temp_directory_path() / "synfoc_test_run.ckpt";
  save_checkpoint(path, tr.checkpoint());
  const auto ckpt = load_checkpoint(path);
  EXPECT_EQ(ckpt.meta_value("kind"), "synfoc-run");
  const auto rep = evaluate_checkpoint<float>(ckpt, tiny_data());
  const auto again = evaluate_checkpoint<float>(ckpt, tiny_data());
  ASSERT_EQ(rep.reports.size(), 4u);
  for (std::size_t i = 0; i < rep.reports.size(); ++i) {
    const auto& [role, r] = rep.reports[i];
    EXPECT_EQ(r.mean.dsc, again.reports[i].second.mean.dsc);
    const auto* live = tr.log().last_report(role);
    ASSERT_NE(live, nullptr);
    EXPECT_NEAR(r.mean.dsc, live->mean.dsc, 1e-12) << to_string(role);
  }
  fs::remove(path);
  EXPECT_THROW(evaluate_checkpoint<float>(tiny_foundation(), tiny_data()), FormatError);
}

TEST(Pretraining, CheckpointCarriesMetadata) {
  const auto& ck = tiny_foundation();
  EXPECT_EQ(ck.meta_value("kind"), "foundation-pretrained");
  EXPECT_EQ(ck.meta_value("height"), "16");
  const double holdout = std::stod(ck.meta_value("holdout_dsc"));
  EXPECT_GE(holdout, 0.0);
  EXPECT_LE(holdout, 1.0);
}

TEST(Outputs, LogAndSuiteSchemas) {
  auto cfg = tiny_config(Strategy::kSynFoC, 2);
  cfg.suite_strategies = {Strategy::kSynFoC, Strategy::kStandaloneConv};
  const auto dir = fs::temp_directory_path() / "synfoc_test_suite";
  fs::remove_all(dir);
  const auto runs = run_suite(cfg, tiny_data(), &tiny_foundation(), dir, 1);
  ASSERT_EQ(runs.size(), 2u);
  for (const char* f : {"suite.csv", "summary.md", "synfoc/log.csv", "synfoc/metrics.csv", "synfoc/summary.md",
                        "synfoc/config.txt", "synfoc/checkpoint.ckpt", "standalone-conv/log.csv"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  std::ifstream csv(dir / "suite.csv");
  std::string header, row1, row2;
  std::getline(csv, header);
  std::getline(csv, row1);
  std::getline(csv, row2);
  EXPECT_EQ(header, "strategy,conv_dsc,conv_jaccard,conv_hd95,conv_asd,found_dsc,found_jaccard,found_hd95,found_asd");
  EXPECT_EQ(row1.substr(0, 7), "synfoc,");
  EXPECT_EQ(row2.substr(row2.size() - 4), ",,,,") << row2;
  std::ifstream log(dir / "synfoc" / "log.csv");
  std::getline(log, header);
  EXPECT_EQ(header,
            "iter,batch_seed,lambda,l_x,l_u,l_c,l_d,total,phi_self_mean,phi_mut_mean,alpha_mean,phi_self,phi_mut,"
            "alpha,pl_dsc_conv,pl_dsc_found,pl_dsc_ensemble");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 2u);
  std::ifstream metrics(dir / "synfoc" / "metrics.csv");
  std::getline(metrics, header);
  EXPECT_EQ(header, "iter,model,domain,dsc,jaccard,hd95,asd,flagged");
  fs::remove_all(dir);
}

TEST(Outputs, TraceSummaryUsesPerIterationMax) {
  ExperimentLog log;
  IterationRecord a, b;
  a.iter = 0;
  a.pl_conv = 0.2;
  a.pl_found = 0.8;
  a.pl_ensemble = 0.7;
  b.iter = 1;
  b.pl_conv = 0.9;
  b.pl_found = 0.1;
  b.pl_ensemble = 0.6;
  log.append(a);
  log.append(b);
  EXPECT_THROW(log.append(a), TrainingError);
  const auto s = summarize_trace(log);
  EXPECT_EQ(s.iterations, 2u);
  EXPECT_DOUBLE_EQ(s.pointwise_max, 0.85);
  EXPECT_DOUBLE_EQ(s.ensemble, 0.65);
  EXPECT_DOUBLE_EQ(s.conv, 0.55);
}
